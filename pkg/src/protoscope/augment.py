"""Seeded augmentation presets over fish ROIs.

Presets 0-5 mirror the augmentation study's experiment grid:

    0  base (resize, pad, normalize)
    1  base + rotation + horizontal flip
    2  base + color jitter
    3  base + random crop
    4  base + random erasing
    5  base + rotation + horizontal flip + random crop + random erasing

Ops apply in the fixed order rotation, hflip, color jitter, crop, base,
erasing; erasing acts on the normalized tensor so it can also blank
padding-adjacent artifacts. Given the same (image, preset, rng stream)
the output tensor is bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import raster
from .raster import NormalizedTensor, RasterImage
from .rng import SplitMix64

DEFAULT_TARGET = 224
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)

# Fixed application order; "base" is the pivot between geometry ops on the
# raw ROI and erasing on the normalized tensor.
OP_ORDER = ("rotation", "hflip", "color_jitter", "random_crop", "base", "random_erasing")

PRESET_OPS = {
    0: ("base",),
    1: ("rotation", "hflip", "base"),
    2: ("color_jitter", "base"),
    3: ("random_crop", "base"),
    4: ("base", "random_erasing"),
    5: ("rotation", "hflip", "random_crop", "base", "random_erasing"),
}


@dataclass
class AugmentPreset:
    """An ordered op list plus per-op parameters.

    ``id`` is 0-5 for the built-in presets, None for custom op lists.
    """

    id: int | None
    ops: tuple[str, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = [op for op in self.ops if op not in OP_ORDER]
        if unknown:
            raise ValueError(f"unknown ops: {unknown}")
        if "base" not in self.ops:
            raise ValueError("every preset must include the base transform")
        ordered = tuple(op for op in OP_ORDER if op in self.ops)
        if ordered != tuple(self.ops):
            raise ValueError(f"ops must follow the fixed order {OP_ORDER}")

    def op_params(self, op: str) -> dict:
        return self.params.get(op, {})


def preset_from_id(
    preset_id: int,
    target: int = DEFAULT_TARGET,
    mean: tuple = DEFAULT_MEAN,
    std: tuple = DEFAULT_STD,
) -> AugmentPreset:
    """Build one of the six standard presets."""
    if preset_id not in PRESET_OPS:
        raise ValueError(f"unknown preset id {preset_id} (expected 0-5)")
    params = {"base": {"target": target, "mean": tuple(mean), "std": tuple(std)}}
    return AugmentPreset(id=preset_id, ops=PRESET_OPS[preset_id], params=params)


def base_transform(
    img: RasterImage,
    target: int = DEFAULT_TARGET,
    mean: tuple = DEFAULT_MEAN,
    std: tuple = DEFAULT_STD,
) -> NormalizedTensor:
    """Aspect-preserving resize, centered black padding, per-channel normalize.

    The longer side is scaled to ``target`` (the short side rounds
    half-up); odd padding remainders give the extra pixel to the bottom or
    right. Padding pixels are normalized like real black pixels and marked
    in ``pad_flag``.
    """
    mean_arr = np.asarray(mean, dtype=np.float64)
    std_arr = np.asarray(std, dtype=np.float64)
    if mean_arr.shape != (3,) or std_arr.shape != (3,):
        raise ValueError("mean and std must have 3 channels")
    if (std_arr <= 0).any():
        raise ValueError("std must be positive")
    if target < 1:
        raise ValueError("target size must be positive")

    h, w = img.height, img.width
    if w >= h:
        new_w = target
        new_h = max(1, int(math.floor(h * target / w + 0.5)))
    else:
        new_h = target
        new_w = max(1, int(math.floor(w * target / h + 0.5)))
    resized = raster._resize_array(img.data, new_h, new_w)

    canvas = np.zeros((target, target, 3), dtype=np.float64)
    pad_top = (target - new_h) // 2
    pad_left = (target - new_w) // 2
    canvas[pad_top : pad_top + new_h, pad_left : pad_left + new_w] = resized
    pad_flag = np.ones((target, target), dtype=bool)
    pad_flag[pad_top : pad_top + new_h, pad_left : pad_left + new_w] = False

    normalized = (canvas - mean_arr) / std_arr
    return NormalizedTensor(normalized, pad_flag)


def sample_rotation_angle(rng: SplitMix64, degrees: float = 15.0) -> float:
    """Angle drawn uniformly from [-degrees, +degrees]."""
    if degrees < 0:
        raise ValueError("degrees must be non-negative")
    return rng.uniform(-degrees, degrees)


def random_rotation(img: RasterImage, rng: SplitMix64, degrees: float = 15.0) -> RasterImage:
    """Rotate by an angle drawn uniformly from [-degrees, +degrees]."""
    angle = sample_rotation_angle(rng, degrees)
    if angle == 0.0:
        return img
    return raster.rotate(img, angle)


def random_hflip(img: RasterImage, rng: SplitMix64, p: float = 0.5) -> RasterImage:
    """Mirror left-right with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if rng.next_float() < p:
        return raster.flip_horizontal(img)
    return img


def random_color_jitter(
    img: RasterImage, rng: SplitMix64, factor_range: tuple = (0.8, 1.2)
) -> RasterImage:
    """Draw independent brightness/contrast/saturation factors uniformly."""
    lo, hi = factor_range
    if not (0.0 < lo <= hi):
        raise ValueError(f"invalid factor range {factor_range}")
    brightness = rng.uniform(lo, hi)
    contrast = rng.uniform(lo, hi)
    saturation = rng.uniform(lo, hi)
    return raster.adjust_color(img, brightness, contrast, saturation)


def sample_crop_rect(
    rng: SplitMix64,
    height: int,
    width: int,
    scale: tuple = (0.8, 1.0),
    aspect: tuple = (0.9, 1.1),
    attempts: int = 10,
):
    """Sample a crop rectangle whose realized area fraction stays in ``scale``.

    Aspect is width/height. Returns (top, left, h, w) or None when no valid
    rectangle is found within ``attempts``.
    """
    area = height * width
    for _ in range(attempts):
        frac = rng.uniform(scale[0], scale[1])
        ratio = rng.uniform(aspect[0], aspect[1])
        target_area = frac * area
        cw = int(math.floor(math.sqrt(target_area * ratio) + 0.5))
        ch = int(math.floor(math.sqrt(target_area / ratio) + 0.5))
        if not (1 <= ch <= height and 1 <= cw <= width):
            continue
        realized = ch * cw / area
        if not (scale[0] <= realized <= scale[1]):
            continue
        top = rng.next_below(height - ch + 1)
        left = rng.next_below(width - cw + 1)
        return top, left, ch, cw
    return None


def random_crop(
    img: RasterImage,
    rng: SplitMix64,
    scale: tuple = (0.8, 1.0),
    aspect: tuple = (0.9, 1.1),
    attempts: int = 10,
) -> RasterImage:
    """Crop a random sub-rectangle; falls back to the full frame."""
    _validate_range("scale", scale, 1.0)
    _validate_range("aspect", aspect, math.inf)
    rect = sample_crop_rect(rng, img.height, img.width, scale, aspect, attempts)
    if rect is None:
        return img
    top, left, ch, cw = rect
    return raster.crop(img, top, left, ch, cw)


def sample_erase_rect(
    rng: SplitMix64,
    height: int,
    width: int,
    area: tuple = (0.02, 0.4),
    aspect: tuple = (0.3, 3.33),
    attempts: int = 100,
):
    """Sample an erase rectangle whose realized area fraction stays in ``area``.

    Aspect is height/width, following the random-erasing convention.
    Returns (top, left, h, w) or None.
    """
    total = height * width
    for _ in range(attempts):
        frac = rng.uniform(area[0], area[1])
        ratio = rng.uniform(aspect[0], aspect[1])
        target_area = frac * total
        eh = int(math.floor(math.sqrt(target_area * ratio) + 0.5))
        ew = int(math.floor(math.sqrt(target_area / ratio) + 0.5))
        if not (1 <= eh <= height and 1 <= ew <= width):
            continue
        realized = eh * ew / total
        if not (area[0] <= realized <= area[1]):
            continue
        top = rng.next_below(height - eh + 1)
        left = rng.next_below(width - ew + 1)
        return top, left, eh, ew
    return None


def random_erasing(
    img: RasterImage,
    rng: SplitMix64,
    p: float = 0.5,
    area: tuple = (0.02, 0.4),
    aspect: tuple = (0.3, 3.33),
    attempts: int = 100,
) -> RasterImage:
    """With probability p, blank one random rectangle to black."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    _validate_range("area", area, 1.0)
    _validate_range("aspect", aspect, math.inf)
    if rng.next_float() >= p:
        return img
    rect = sample_erase_rect(rng, img.height, img.width, area, aspect, attempts)
    if rect is None:
        return img
    top, left, eh, ew = rect
    data = img.data.copy()
    data[top : top + eh, left : left + ew] = 0.0
    return RasterImage(data)


def _validate_range(name: str, pair: tuple, hi_bound: float) -> None:
    lo, hi = pair
    if not (0.0 < lo <= hi <= hi_bound):
        raise ValueError(f"invalid {name} range {pair}")


def apply_preset(img: RasterImage, preset: AugmentPreset, rng: SplitMix64) -> NormalizedTensor:
    """Apply a preset's ops in the fixed order, returning the input tensor.

    Erasing runs after normalization, blanking the rectangle to normalized
    black so padding-adjacent artifacts can be masked too.
    """
    x = img
    if "rotation" in preset.ops:
        x = random_rotation(x, rng, **preset.op_params("rotation"))
    if "hflip" in preset.ops:
        x = random_hflip(x, rng, **preset.op_params("hflip"))
    if "color_jitter" in preset.ops:
        x = random_color_jitter(x, rng, **preset.op_params("color_jitter"))
    if "random_crop" in preset.ops:
        x = random_crop(x, rng, **preset.op_params("random_crop"))

    base_params = preset.op_params("base")
    tensor = base_transform(x, **base_params)

    if "random_erasing" in preset.ops:
        params = dict(preset.op_params("random_erasing"))
        p = params.pop("p", 0.5)
        area = params.pop("area", (0.02, 0.4))
        aspect = params.pop("aspect", (0.3, 3.33))
        attempts = params.pop("attempts", 100)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {p}")
        if rng.next_float() < p:
            rect = sample_erase_rect(rng, tensor.height, tensor.width, area, aspect, attempts)
            if rect is not None:
                top, left, eh, ew = rect
                mean = np.asarray(base_params.get("mean", DEFAULT_MEAN), dtype=np.float64)
                std = np.asarray(base_params.get("std", DEFAULT_STD), dtype=np.float64)
                black = (0.0 - mean) / std
                data = tensor.data.copy()
                data[top : top + eh, left : left + ew] = black
                tensor = NormalizedTensor(data, tensor.pad_flag)
    return tensor
