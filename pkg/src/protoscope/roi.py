"""Foreground segmentation and mask utilities.

The built-in segmenter is a deterministic desk-scale stand-in for a
text-prompted detector/segmenter pair: it models the background as the
per-channel median of a thin border frame, thresholds the pixel-to-
background distance with Otsu's rule, cleans the result with 3x3
morphology, keeps the largest connected component, and fills interior
holes. Externally produced masks are ingested through `load_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as _PILImage
from PIL import UnidentifiedImageError
from scipy import ndimage

from .raster import Mask, RasterError, RasterImage


class NoForegroundError(Exception):
    """The scene could not be segmented into a plausible foreground."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle: (top, left) corner plus positive extent."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("bounding box must have positive extent")
        if self.top < 0 or self.left < 0:
            raise ValueError("bounding box must lie inside the image")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width


@dataclass
class SegmentationResult:
    mask: Mask
    bbox: BoundingBox
    foreground_fraction: float


def otsu_threshold(hist: np.ndarray) -> int:
    """Index t maximizing inter-class variance; ties go to the lowest t.

    Foreground is everything in bins strictly above the returned index.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    p = hist / total
    bins = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * bins)
    mu_total = m0[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(hist.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mu_total - m0) / w1
        between[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    return int(np.argmax(between))


def _shift_bool(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    # Pixels shifted in from outside the frame are False.
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    yd = slice(max(-dy, 0), min(h - dy, h))
    xd = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[yd, xd]
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            out &= _shift_bool(mask, dy, dx)
    return out


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            out |= _shift_bool(mask, dy, dx)
    return out


def binary_open(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Erosion then dilation with a square kernel (odd size)."""
    radius = kernel // 2
    return _dilate(_erode(mask, radius), radius)


def binary_close(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Dilation then erosion with a square kernel (odd size)."""
    radius = kernel // 2
    return _erode(_dilate(mask, radius), radius)


def largest_component(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Keep only the largest connected component (ties: lowest label)."""
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    else:
        raise ValueError("connectivity must be 4 or 8")
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return np.zeros_like(mask)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill interior holes: complement regions not reachable from the border."""
    return ndimage.binary_fill_holes(mask)


def mask_bbox(mask: Mask) -> BoundingBox:
    """Tight axis-aligned hull of the mask's true pixels."""
    rows = np.flatnonzero(mask.data.any(axis=1))
    cols = np.flatnonzero(mask.data.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return BoundingBox(
        top=int(rows[0]),
        left=int(cols[0]),
        height=int(rows[-1] - rows[0] + 1),
        width=int(cols[-1] - cols[0] + 1),
    )


def segment_foreground(
    img: RasterImage,
    border_width: int = 2,
    morph_kernel: int = 3,
    connectivity: int = 8,
    reject_fraction: float = 0.9,
) -> SegmentationResult:
    """Segment the dominant foreground object against a border-sampled background.

    Steps: estimate the background color as the per-channel median over the
    border frame; compute per-pixel Euclidean RGB distance to it; map the
    distances linearly onto 256 histogram bins (bin = floor(256 d / d_max),
    capped at 255); apply Otsu's threshold (foreground strictly above, ties
    toward the lowest threshold); open then close with the morph kernel;
    keep the largest connected component; fill interior holes.

    Raises NoForegroundError when the thresholded mask is empty, morphology
    removes everything, or the final foreground fraction exceeds
    ``reject_fraction``.
    """
    if img.height < 8 or img.width < 8:
        raise ValueError("image must be at least 8x8 to segment")
    h, w = img.height, img.width
    border = np.zeros((h, w), dtype=bool)
    border[:border_width, :] = True
    border[h - border_width :, :] = True
    border[:, :border_width] = True
    border[:, w - border_width :] = True
    background = np.median(img.data[border], axis=0)

    dist = np.sqrt(((img.data - background) ** 2).sum(axis=2))
    dmax = dist.max()
    if dmax > 0:
        bins = np.minimum((dist / dmax * 256.0).astype(np.int64), 255)
    else:
        bins = np.zeros((h, w), dtype=np.int64)
    hist = np.bincount(bins.ravel(), minlength=256)
    threshold = otsu_threshold(hist)
    fg = bins > threshold
    if not fg.any():
        raise NoForegroundError("thresholded mask is empty (no contrast)")

    fg = binary_close(binary_open(fg, morph_kernel), morph_kernel)
    if not fg.any():
        raise NoForegroundError("morphology removed all candidate foreground")
    fg = largest_component(fg, connectivity)
    fg = fill_holes(fg)

    fraction = float(fg.mean())
    if fraction > reject_fraction:
        raise NoForegroundError(
            f"foreground fraction {fraction:.3f} exceeds {reject_fraction} "
            "(scene judged unsegmentable)"
        )
    mask = Mask(fg)
    return SegmentationResult(mask=mask, bbox=mask_bbox(mask), foreground_fraction=fraction)


def load_mask(path, img: RasterImage) -> Mask:
    """Load an 8-bit single-channel PNG mask; pixels above 127 are foreground."""
    path = Path(path)
    try:
        with _PILImage.open(path) as im:
            if im.mode != "L":
                raise ValueError(f"multi-channel file: mask mode {im.mode}, expected L ({path})")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise RasterError(f"unreadable file: {path}") from exc
    except OSError as exc:
        raise RasterError(f"unreadable file: {path}: {exc}") from exc
    if arr.shape != (img.height, img.width):
        raise ValueError(
            f"dimension mismatch: mask {arr.shape} vs image "
            f"({img.height}, {img.width})"
        )
    return Mask(arr > 127)


def save_mask(mask: Mask, path) -> None:
    """Write an 8-bit single-channel PNG with foreground = 255."""
    arr = np.where(mask.data, 255, 0).astype(np.uint8)
    _PILImage.fromarray(arr, mode="L").save(Path(path), format="PNG")


def apply_mask(img: RasterImage, mask: Mask) -> RasterImage:
    """Copy foreground pixels; set background pixels to black."""
    if (mask.height, mask.width) != (img.height, img.width):
        raise ValueError(
            f"dimension mismatch: mask ({mask.height}, {mask.width}) vs image "
            f"({img.height}, {img.width})"
        )
    return RasterImage(np.where(mask.data[..., None], img.data, 0.0))
