"""Interpretability artifacts: per-image decision chains and per-prototype
activation heatmaps with source bounding boxes.

A decision chain walks the hard route and labels each internal node
Present (similarity >= threshold, go right) or Absent. A heatmap
evaluates one prototype's similarity at every feature location,
upsamples it to image size, and back-projects the best location to an
approximate receptive-field rectangle in pixel coordinates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import prototree as pt
from .features import DEFAULT_ARCH, FeatureMap
from .raster import RasterImage, _resize_array
from .roi import BoundingBox

_COLORMAP_CACHE = None


def load_colormap() -> np.ndarray:
    """The packaged 256-entry colormap as float RGB rows in [0, 1]."""
    global _COLORMAP_CACHE
    if _COLORMAP_CACHE is None:
        text = resources.files("protoscope").joinpath("colormap.csv").read_text()
        rows = list(csv.DictReader(text.splitlines()))
        table = np.zeros((256, 3))
        for row in rows:
            table[int(row["index"])] = (int(row["r"]), int(row["g"]), int(row["b"]))
        table /= 255.0
        table.setflags(write=False)
        _COLORMAP_CACHE = table
    return _COLORMAP_CACHE


@dataclass
class DecisionStep:
    node: int
    similarity: float
    verdict: str               # "Present" | "Absent"
    provenance: dict | None    # {"map_id", "row", "col"} when projected


@dataclass
class DecisionReport:
    steps: list
    leaf_index: int
    leaf_distribution: list
    soft_distribution: list    # full soft prediction, for comparison
    threshold: float


@dataclass
class PrototypeHeatmap:
    node: int
    grid: np.ndarray           # H' x W' similarities in (0, 1]
    upsampled: np.ndarray      # image-sized bilinear upsampling
    max_location: tuple        # (row, col) on the feature grid
    max_similarity: float
    bbox: BoundingBox          # receptive-field rectangle in image coordinates


def decision_chain(tree: pt.PrototypeTree, fm: FeatureMap, threshold: float = 0.5) -> DecisionReport:
    """Hard-route the map and report a Present/Absent verdict per node."""
    route = pt.hard_route(tree, fm, threshold=threshold)
    soft = pt.predict(tree, fm).class_distribution
    steps = []
    for node, sim in zip(route.path, route.similarities):
        prov = None
        if tree.provenance is not None:
            prov = tree.provenance[node - 1]
        steps.append(
            DecisionStep(
                node=node,
                similarity=sim,
                verdict="Present" if sim >= threshold else "Absent",
                provenance=prov,
            )
        )
    return DecisionReport(
        steps=steps,
        leaf_index=route.leaf_index,
        leaf_distribution=route.leaf_distribution.tolist(),
        soft_distribution=soft.tolist(),
        threshold=threshold,
    )


def _backbone_geometry(arch) -> tuple[int, int]:
    """(total stride, nominal receptive field) of a conv stack."""
    stride = 1
    rf = 1
    for layer in arch:
        rf += (layer["kernel"] - 1) * stride
        stride *= layer["stride"]
    return stride, rf


def receptive_field_box(
    location: tuple,
    image_h: int,
    image_w: int,
    arch=DEFAULT_ARCH,
    grid_shape: tuple | None = None,
) -> BoundingBox:
    """Image rectangle explained by one feature cell.

    With a known conv stack the cell's stride-anchored rectangle expands
    to the nominal receptive field (extra pixels split floor-left /
    ceil-right); without one (external feature maps) the cell maps to its
    proportional image tile.
    """
    row, col = location
    if arch is not None:
        stride, rf = _backbone_geometry(arch)
        margin = (rf - stride) // 2
        top, left = row * stride - margin, col * stride - margin
        h = w = rf
    else:
        if grid_shape is None:
            raise ValueError("grid_shape is required without an arch")
        gh, gw = grid_shape
        sh, sw = image_h / gh, image_w / gw
        top, left = int(round(row * sh)), int(round(col * sw))
        h, w = max(1, int(round(sh))), max(1, int(round(sw)))
    top = min(max(top, 0), image_h - 1)
    left = min(max(left, 0), image_w - 1)
    h = min(h, image_h - top)
    w = min(w, image_w - left)
    return BoundingBox(top=top, left=left, height=h, width=w)


def prototype_heatmap(
    tree: pt.PrototypeTree, node: int, fm: FeatureMap, image: RasterImage
) -> PrototypeHeatmap:
    """Similarity of one internal node's prototype at every feature location."""
    if not 1 <= node <= tree.num_internal:
        raise ValueError(f"node {node} is a leaf or out of range for depth {tree.depth}")
    proto = tree.prototype(node)
    ssq = pt._squared_distances(fm, proto)
    grid = np.exp(-pt._distance_from_ssq(ssq))
    flat = int(np.argmax(grid))
    row, col = divmod(flat, fm.width)
    upsampled = _resize_array(grid[..., None], image.height, image.width)[..., 0]
    arch = None
    if tree.backbone is not None and tree.backbone.get("kind") == "seeded":
        arch = tree.backbone.get("arch", DEFAULT_ARCH)
    elif tree.backbone is None:
        arch = DEFAULT_ARCH
    bbox = receptive_field_box(
        (row, col), image.height, image.width, arch=arch, grid_shape=(fm.height, fm.width)
    )
    return PrototypeHeatmap(
        node=node,
        grid=grid,
        upsampled=upsampled,
        max_location=(row, col),
        max_similarity=float(grid[row, col]),
        bbox=bbox,
    )


def render_overlay(image: RasterImage, heatmap: PrototypeHeatmap, alpha: float = 0.5) -> RasterImage:
    """Alpha-blend the heatmap over the image and draw a 2 px red box.

    The per-pixel blend weight is alpha * heat, so zero heat leaves the
    image untouched.
    """
    if heatmap.upsampled.shape != (image.height, image.width):
        raise ValueError(
            f"size mismatch: heatmap {heatmap.upsampled.shape} vs image "
            f"({image.height}, {image.width})"
        )
    heat = np.clip(heatmap.upsampled, 0.0, 1.0)
    table = load_colormap()
    colors = table[np.round(heat * 255).astype(np.intp)]
    weight = (alpha * heat)[..., None]
    out = (1.0 - weight) * image.data + weight * colors
    out = np.clip(out, 0.0, 1.0)

    box = heatmap.bbox
    red = np.array([1.0, 0.0, 0.0])
    t, l, b, r = box.top, box.left, box.bottom, box.right
    edge = 2
    out[t : min(t + edge, b), l:r] = red
    out[max(b - edge, t) : b, l:r] = red
    out[t:b, l : min(l + edge, r)] = red
    out[t:b, max(r - edge, l) : r] = red
    return RasterImage(out)


def write_report(report: DecisionReport, path) -> None:
    """Persist a decision chain as a JSON sidecar document."""
    Path(path).write_text(json.dumps(asdict(report), indent=2) + "\n")
