"""Frozen convolutional feature extraction and the FMAP exchange format.

The built-in backbone is a tiny seeded random convnet (three blocks of
3x3 stride-2 same-padded convolution + ReLU, channels 16 -> 32 -> 64)
whose weights are immutable after construction. Real pretrained features
enter the pipeline through FMAP files instead.

FMAP layout (little-endian): bytes 0-3 ASCII "FMAP"; u32 fields
version=1, H', W', D; then H'*W'*D float32 values, channel-fastest
row-major (index = ((h*W') + w)*D + c).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .raster import NormalizedTensor
from .rng import SplitMix64

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1

DEFAULT_ARCH = (
    {"kernel": 3, "stride": 2, "out_channels": 16},
    {"kernel": 3, "stride": 2, "out_channels": 32},
    {"kernel": 3, "stride": 2, "out_channels": 64},
)


class FmapError(Exception):
    """Malformed FMAP file."""


class FeatureMap:
    """H' x W' x D float32 grid of per-location feature vectors."""

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"expected H' x W' x D values, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError("feature map axes must be at least 1")
        if not np.isfinite(arr).all():
            raise ValueError("non-finite values in feature map")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    def patch(self, row: int, col: int) -> np.ndarray:
        """The feature vector at one spatial location, as float64."""
        return self.values[row, col].astype(np.float64)


def validate_arch(arch) -> tuple:
    layers = tuple(dict(layer) for layer in arch)
    if not layers:
        raise ValueError("malformed arch: empty layer list")
    for layer in layers:
        if set(layer) != {"kernel", "stride", "out_channels"}:
            raise ValueError(f"malformed arch layer: {layer}")
        if any(not isinstance(layer[k], int) or layer[k] < 1 for k in layer):
            raise ValueError(f"malformed arch layer: {layer}")
    return layers


class FrozenBackbone:
    """Immutable conv stack; weights never update after construction."""

    __slots__ = ("arch", "weights", "biases", "seed")

    def __init__(self, arch, weights, biases, seed=None):
        self.arch = validate_arch(arch)
        if len(weights) != len(self.arch) or len(biases) != len(self.arch):
            raise ValueError("weights/biases do not match arch")
        ws, bs = [], []
        in_c = 3
        for layer, w, b in zip(self.arch, weights, biases):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            expect = (layer["out_channels"], in_c, layer["kernel"], layer["kernel"])
            if w.shape != expect or b.shape != (layer["out_channels"],):
                raise ValueError(f"weight shape {w.shape} does not match arch {expect}")
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
            in_c = layer["out_channels"]
        self.weights = tuple(ws)
        self.biases = tuple(bs)
        self.seed = seed

    @property
    def out_channels(self) -> int:
        return self.arch[-1]["out_channels"]

    def grid_size(self, height: int, width: int) -> tuple[int, int]:
        """Output spatial size for a given input size (ceil division per layer)."""
        for layer in self.arch:
            height = -(-height // layer["stride"])
            width = -(-width // layer["stride"])
        return height, width


def init_frozen(seed: int, arch=DEFAULT_ARCH) -> FrozenBackbone:
    """He-uniform weights (bound sqrt(6/fan_in)) from SplitMix64(seed); zero biases.

    Values fill each weight tensor in C order of (out, in, kh, kw), layer
    by layer, so a seed pins every weight bit-exactly.
    """
    layers = validate_arch(arch)
    rng = SplitMix64(seed)
    weights, biases = [], []
    in_c = 3
    for layer in layers:
        k, out_c = layer["kernel"], layer["out_channels"]
        fan_in = in_c * k * k
        bound = math.sqrt(6.0 / fan_in)
        flat = np.empty(out_c * in_c * k * k, dtype=np.float64)
        for i in range(flat.size):
            flat[i] = (2.0 * rng.next_float() - 1.0) * bound
        weights.append(flat.reshape(out_c, in_c, k, k))
        biases.append(np.zeros(out_c, dtype=np.float64))
        in_c = out_c
    return FrozenBackbone(layers, weights, biases, seed=seed)


def _conv_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Stride-s conv with same-padding: out = ceil(in/s), extra pad to bottom/right."""
    h, w, _ = x.shape
    out_c, in_c, k, _ = weight.shape
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    x = np.pad(x, ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (out_h, out_w, in_c, k, k)
    cols = windows.reshape(out_h * out_w, in_c * k * k)
    out = cols @ weight.reshape(out_c, in_c * k * k).T + bias
    return out.reshape(out_h, out_w, out_c)


def extract(backbone: FrozenBackbone, tensor: NormalizedTensor) -> FeatureMap:
    """Deterministic forward pass; never mutates weights."""
    x = tensor.data
    if x.shape[2] != 3:
        raise ValueError(f"shape mismatch: expected 3 input channels, got {x.shape[2]}")
    for layer, weight, bias in zip(backbone.arch, backbone.weights, backbone.biases):
        x = _conv_same(x, weight, bias, layer["stride"])
        x = np.maximum(x, 0.0)
    return FeatureMap(x)


def save_feature_map(fm: FeatureMap, path) -> None:
    header = FMAP_MAGIC + struct.pack("<IIII", FMAP_VERSION, fm.height, fm.width, fm.depth)
    payload = np.ascontiguousarray(fm.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise FmapError(f"truncated payload: {len(raw)} bytes is too short for a header ({path})")
    if raw[:4] != FMAP_MAGIC:
        raise FmapError(f"bad magic {raw[:4]!r} ({path})")
    version, height, width, depth = struct.unpack("<IIII", raw[4:20])
    if version != FMAP_VERSION:
        raise FmapError(f"version mismatch: {version} (expected {FMAP_VERSION}) ({path})")
    if min(height, width, depth) < 1:
        raise FmapError(f"bad dimensions {height}x{width}x{depth} ({path})")
    need = height * width * depth * 4
    if len(raw) - 20 != need:
        raise FmapError(
            f"truncated payload: expected {need} value bytes, found {len(raw) - 20} ({path})"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=20).reshape(height, width, depth)
    if not np.isfinite(values).all():
        raise FmapError(f"non-finite values on load ({path})")
    return FeatureMap(values)
