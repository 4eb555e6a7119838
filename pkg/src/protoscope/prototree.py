"""Soft prototype decision tree: routing, prediction, analytic gradients,
prototype projection, hard routing, and checkpoint serialization.

Tree layout: a complete binary tree of the given depth. Nodes are
numbered with root = 1 and children of node n at 2n / 2n+1, so internal
nodes occupy 1 .. 2**depth - 1 and leaves 2**depth .. 2**(depth+1) - 1;
leaf k in left-to-right order is node 2**depth + k.

Routing semantics: each internal node finds the feature-map location
nearest its prototype and converts that distance into a similarity
s = exp(-distance) in (0, 1]. The edge to the right child carries s, the
edge to the left child 1 - s, and a leaf's path probability is the
product of edge values from the root, so leaf probabilities always sum
to 1. The prediction is the path-probability-weighted mixture of the
leaves' softmax class distributions.

Distances are stabilized as sqrt(ssq + EPSILON) - sqrt(EPSILON): the
subtraction keeps an exact prototype/patch match at distance 0 (so its
similarity is exactly 1), while the gradient denominator
sqrt(ssq + EPSILON) never vanishes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureMap
from .rng import SplitMix64

EPSILON = 1e-12
_STAB = math.sqrt(EPSILON)

# Predicted probabilities are floored here before the log in the loss.
PROB_FLOOR = 1e-12

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


class PrototypeTree:
    """Complete binary tree with one prototype per internal node and
    one class-logit row per leaf."""

    def __init__(
        self,
        depth: int,
        prototypes,
        leaf_logits,
        backbone: dict | None = None,
        normalization: dict | None = None,
        preset_id: int | None = None,
        provenance: list | None = None,
        train_info: dict | None = None,
    ):
        if depth < 1:
            raise ValueError("depth must be at least 1")
        protos = np.array(prototypes, dtype=np.float64)
        logits = np.array(leaf_logits, dtype=np.float64)
        if protos.ndim != 2 or protos.shape[0] != 2**depth - 1:
            raise ValueError(
                f"expected {2**depth - 1} prototypes for depth {depth}, "
                f"got shape {protos.shape}"
            )
        if logits.ndim != 2 or logits.shape[0] != 2**depth:
            raise ValueError(
                f"expected {2**depth} leaf-logit rows for depth {depth}, "
                f"got shape {logits.shape}"
            )
        if logits.shape[1] < 2:
            raise ValueError("need at least two classes")
        if not (np.isfinite(protos).all() and np.isfinite(logits).all()):
            raise ValueError("non-finite tree parameters")
        self.depth = depth
        self.prototypes = protos
        self.leaf_logits = logits
        self.backbone = backbone
        self.normalization = normalization
        self.preset_id = preset_id
        self.provenance = provenance
        self.train_info = train_info

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def num_classes(self) -> int:
        return self.leaf_logits.shape[1]

    @property
    def num_internal(self) -> int:
        return 2**self.depth - 1

    @property
    def num_leaves(self) -> int:
        return 2**self.depth

    def prototype(self, node: int) -> np.ndarray:
        """Prototype of internal node n (1-based heap index)."""
        if not 1 <= node <= self.num_internal:
            raise ValueError(f"node {node} is not internal for depth {self.depth}")
        return self.prototypes[node - 1]

    def leaf_distributions(self) -> np.ndarray:
        """softmax of each leaf's class logits, rows summing to 1."""
        return _softmax_rows(self.leaf_logits)

    def copy(self) -> "PrototypeTree":
        return PrototypeTree(
            self.depth,
            self.prototypes.copy(),
            self.leaf_logits.copy(),
            backbone=self.backbone,
            normalization=self.normalization,
            preset_id=self.preset_id,
            provenance=self.provenance,
            train_info=self.train_info,
        )


def init_tree(depth: int, feature_dim: int, num_classes: int = 2, seed: int = 0) -> PrototypeTree:
    """Fresh tree: prototype components 0.1 * N(0,1) from SplitMix64(seed),
    leaf logits zero (uniform leaves)."""
    rng = SplitMix64(seed)
    protos = np.empty((2**depth - 1, feature_dim), dtype=np.float64)
    for i in range(protos.shape[0]):
        for j in range(feature_dim):
            protos[i, j] = 0.1 * rng.normal()
    logits = np.zeros((2**depth, num_classes), dtype=np.float64)
    return PrototypeTree(depth, protos, logits)


@dataclass
class RoutingTrace:
    """Per-internal-node routing stats plus per-leaf path probabilities.

    Arrays are indexed by node - 1 for internal nodes and by left-to-right
    leaf position for leaves.
    """

    locations: np.ndarray      # (num_internal, 2) int rows/cols of nearest patches
    distances: np.ndarray      # (num_internal,)
    similarities: np.ndarray   # (num_internal,)
    leaf_probabilities: np.ndarray  # (num_leaves,)


@dataclass
class Prediction:
    class_distribution: np.ndarray
    trace: RoutingTrace


@dataclass
class HardRoute:
    """Deterministic root-to-leaf descent."""

    leaf_index: int            # left-to-right leaf position
    leaf_node: int             # heap index of the leaf
    path: list                 # internal node ids visited, root first
    went_right: list           # per path node: True when similarity >= threshold
    similarities: list         # per path node
    leaf_distribution: np.ndarray
    threshold: float


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _squared_distances(fm: FeatureMap, prototype: np.ndarray) -> np.ndarray:
    diff = fm.values.astype(np.float64) - prototype
    return np.einsum("hwc,hwc->hw", diff, diff)


def _distance_from_ssq(ssq) -> np.ndarray:
    return np.sqrt(ssq + EPSILON) - _STAB


def nearest_patch(fm: FeatureMap, prototype) -> tuple[tuple[int, int], float, np.ndarray]:
    """Location, stabilized distance, and value of the nearest feature patch.

    Ties break by row-major scan order (first minimum wins).
    """
    prototype = np.asarray(prototype, dtype=np.float64)
    if prototype.shape != (fm.depth,):
        raise ValueError(
            f"dimension mismatch: prototype {prototype.shape} vs feature depth {fm.depth}"
        )
    ssq = _squared_distances(fm, prototype)
    flat = int(np.argmin(ssq))
    row, col = divmod(flat, fm.width)
    distance = float(_distance_from_ssq(ssq[row, col]))
    return (row, col), distance, fm.patch(row, col)


def similarity(distance: float) -> float:
    """Routing probability exp(-distance), in (0, 1]."""
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return math.exp(-distance)


def _route_nodes(tree: PrototypeTree, fm: FeatureMap):
    """Per-internal-node nearest patches plus similarity values."""
    if fm.depth != tree.feature_dim:
        raise ValueError(
            f"dimension mismatch: feature depth {fm.depth} vs tree dim {tree.feature_dim}"
        )
    n_int = tree.num_internal
    locations = np.zeros((n_int, 2), dtype=np.int64)
    distances = np.zeros(n_int)
    sims = np.zeros(n_int)
    values = fm.values.astype(np.float64)
    for node in range(1, n_int + 1):
        diff = values - tree.prototypes[node - 1]
        ssq = np.einsum("hwc,hwc->hw", diff, diff)
        flat = int(np.argmin(ssq))
        row, col = divmod(flat, fm.width)
        locations[node - 1] = (row, col)
        distances[node - 1] = _distance_from_ssq(ssq[row, col])
        sims[node - 1] = math.exp(-distances[node - 1])
    return locations, distances, sims


def _leaf_probabilities(depth: int, sims: np.ndarray) -> np.ndarray:
    # Downward prefix products over the heap: right edge s, left edge 1 - s.
    prob = np.zeros(2 ** (depth + 1))
    prob[1] = 1.0
    for node in range(1, 2**depth):
        s = sims[node - 1]
        prob[2 * node] = prob[node] * (1.0 - s)
        prob[2 * node + 1] = prob[node] * s
    return prob[2**depth : 2 ** (depth + 1)]


def path_probabilities(tree: PrototypeTree, fm: FeatureMap) -> RoutingTrace:
    """Route a feature map: per-node similarities and per-leaf probabilities."""
    locations, distances, sims = _route_nodes(tree, fm)
    leaf_probs = _leaf_probabilities(tree.depth, sims)
    return RoutingTrace(locations, distances, sims, leaf_probs)


def predict(tree: PrototypeTree, fm: FeatureMap) -> Prediction:
    """Soft prediction: path-probability-weighted mixture of leaf distributions."""
    trace = path_probabilities(tree, fm)
    q = tree.leaf_distributions()
    yhat = trace.leaf_probabilities @ q
    return Prediction(yhat, trace)


def loss(pred: Prediction, label: int) -> float:
    """Cross-entropy -log(yhat[label]) with the probability floored at 1e-12."""
    n = pred.class_distribution.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"invalid label {label} for {n} classes")
    return -math.log(max(float(pred.class_distribution[label]), PROB_FLOOR))


def value_and_grad(tree: PrototypeTree, fm: FeatureMap, label: int):
    """Single-sample loss, prediction, and exact gradients.

    The argmin patch location is held constant (subgradient through the
    selected patch); the feature map itself receives no gradient. Returns
    (loss, Prediction, {"prototypes": ..., "leaf_logits": ...}).
    """
    if not 0 <= label < tree.num_classes:
        raise ValueError(f"invalid label {label} for {tree.num_classes} classes")
    locations, distances, sims = _route_nodes(tree, fm)
    leaf_probs = _leaf_probabilities(tree.depth, sims)
    q = tree.leaf_distributions()
    yhat = leaf_probs @ q
    loss_value = -math.log(max(float(yhat[label]), PROB_FLOOR))

    d_protos = np.zeros_like(tree.prototypes)
    d_logits = np.zeros_like(tree.leaf_logits)
    if yhat[label] <= PROB_FLOOR:
        # Flat region of the floored loss.
        return loss_value, Prediction(yhat, RoutingTrace(locations, distances, sims, leaf_probs)), {
            "prototypes": d_protos,
            "leaf_logits": d_logits,
        }

    g = -1.0 / float(yhat[label])
    depth = tree.depth
    first_leaf = 2**depth

    # Upward pass: v[n] = probability mass of the label under subtree n.
    v = np.zeros(2 ** (depth + 1))
    v[first_leaf:] = q[:, label]
    for node in range(first_leaf - 1, 0, -1):
        s = sims[node - 1]
        v[node] = (1.0 - s) * v[2 * node] + s * v[2 * node + 1]

    # Downward prefix: rho[n] = probability of reaching node n.
    rho_full = np.zeros(2 ** (depth + 1))
    rho_full[1] = 1.0
    for node in range(1, first_leaf):
        s = sims[node - 1]
        rho_full[2 * node] = rho_full[node] * (1.0 - s)
        rho_full[2 * node + 1] = rho_full[node] * s

    values = fm.values.astype(np.float64)
    for node in range(1, first_leaf):
        s = sims[node - 1]
        dL_ds = g * rho_full[node] * (v[2 * node + 1] - v[2 * node])
        row, col = locations[node - 1]
        patch = values[row, col]
        diff = tree.prototypes[node - 1] - patch
        stab = math.sqrt(float((diff * diff).sum()) + EPSILON)
        # ds/dp = -s * (p - z*) / sqrt(ssq + eps)
        d_protos[node - 1] = dL_ds * (-s) * diff / stab

    # Leaf logits through each leaf's softmax.
    for leaf in range(tree.num_leaves):
        pi = leaf_probs[leaf]
        if pi == 0.0:
            continue
        row = q[leaf]
        grad_row = g * pi * row[label] * (-row)
        grad_row[label] += g * pi * row[label]
        d_logits[leaf] = grad_row

    trace = RoutingTrace(locations, distances, sims, leaf_probs)
    return loss_value, Prediction(yhat, trace), {"prototypes": d_protos, "leaf_logits": d_logits}


def backward(tree: PrototypeTree, fm: FeatureMap, label: int) -> dict:
    """Exact analytic gradient of the single-sample loss."""
    _, _, grads = value_and_grad(tree, fm, label)
    return grads


def project_prototypes(tree: PrototypeTree, training_maps, map_ids=None) -> PrototypeTree:
    """Replace each prototype with its globally nearest training patch.

    Scans every location of every map; ties keep the earliest map, then
    row-major order within a map. Records (map id, row, col) per
    prototype so visual explanations can show the exact source region.
    """
    maps = list(training_maps)
    if not maps:
        raise ValueError("empty training set")
    if map_ids is None:
        map_ids = list(range(len(maps)))
    else:
        map_ids = list(map_ids)
        if len(map_ids) != len(maps):
            raise ValueError("map_ids length does not match training maps")
    new_protos = tree.prototypes.copy()
    provenance = []
    for node in range(1, tree.num_internal + 1):
        proto = tree.prototypes[node - 1]
        best = None  # (ssq, map position, row, col)
        for pos, fm in enumerate(maps):
            if fm.depth != tree.feature_dim:
                raise ValueError(
                    f"dimension mismatch: map {map_ids[pos]!r} depth {fm.depth} "
                    f"vs tree dim {tree.feature_dim}"
                )
            ssq = _squared_distances(fm, proto)
            flat = int(np.argmin(ssq))
            row, col = divmod(flat, fm.width)
            cand = float(ssq[row, col])
            if best is None or cand < best[0]:
                best = (cand, pos, row, col)
        _, pos, row, col = best
        new_protos[node - 1] = maps[pos].patch(row, col)
        provenance.append({"map_id": map_ids[pos], "row": int(row), "col": int(col)})
    projected = tree.copy()
    projected.prototypes = new_protos
    projected.provenance = provenance
    return projected


def hard_route(tree: PrototypeTree, fm: FeatureMap, threshold: float = 0.5) -> HardRoute:
    """Deterministic descent: go right iff similarity >= threshold."""
    _, _, sims = _route_nodes(tree, fm)
    node = 1
    path, went_right, path_sims = [], [], []
    for _ in range(tree.depth):
        s = float(sims[node - 1])
        right = s >= threshold
        path.append(node)
        went_right.append(right)
        path_sims.append(s)
        node = 2 * node + 1 if right else 2 * node
    leaf_index = node - 2**tree.depth
    dist = tree.leaf_distributions()[leaf_index]
    return HardRoute(leaf_index, node, path, went_right, path_sims, dist, threshold)


# ---------------------------------------------------------------------------
# Checkpoints: a single self-describing JSON document. Floats survive the
# round trip bit-exactly (repr-based shortest decimal formatting).


def serialize(tree: PrototypeTree, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "depth": tree.depth,
        "feature_dim": tree.feature_dim,
        "num_classes": tree.num_classes,
        "prototypes": tree.prototypes.tolist(),
        "leaf_logits": tree.leaf_logits.tolist(),
        "backbone": tree.backbone,
        "normalization": tree.normalization,
        "preset": tree.preset_id,
        "projection": tree.provenance,
        "train": tree.train_info,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def deserialize(path) -> PrototypeTree:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"malformed checkpoint {path}: not an object")
    missing = {"version", "depth", "feature_dim", "num_classes", "prototypes", "leaf_logits"} - set(doc)
    if missing:
        raise CheckpointError(f"malformed checkpoint {path}: missing fields {sorted(missing)}")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"version mismatch: {doc['version']} (expected {CHECKPOINT_VERSION}) ({path})"
        )
    try:
        tree = PrototypeTree(
            int(doc["depth"]),
            doc["prototypes"],
            doc["leaf_logits"],
            backbone=doc.get("backbone"),
            normalization=doc.get("normalization"),
            preset_id=doc.get("preset"),
            provenance=doc.get("projection"),
            train_info=doc.get("train"),
        )
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if tree.feature_dim != int(doc["feature_dim"]) or tree.num_classes != int(doc["num_classes"]):
        raise CheckpointError(
            f"malformed checkpoint {path}: header dims do not match arrays"
        )
    return tree
