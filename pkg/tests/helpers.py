"""Shared fixtures: synthetic datasets and bulk SplitMix64 draws."""

import numpy as np

from protoscope import rng as prng
from protoscope import train
from protoscope.raster import RasterImage

_INC = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def bulk_uniform(seed: int, n: int) -> np.ndarray:
    """The first n next_float() values of SplitMix64(seed), vectorized."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & prng.MASK64) + _INC * np.arange(1, n + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)) * 2.0**-53


def patch_image(stream, with_patch: bool, size: int = 64, patch: int = 8) -> RasterImage:
    """Textured mid-gray background, optionally with a bright patch.

    The class signal is the presence of the bright square; base gray and
    texture are drawn from the stream so images differ but the background
    distribution is identical across classes.
    """
    base = stream.uniform(0.3, 0.5)
    noise = bulk_uniform(stream.next_u64(), size * size * 3).reshape(size, size, 3)
    img = np.clip(base + (noise * 0.2 - 0.1), 0.0, 1.0)
    if with_patch:
        top = stream.next_below(size - patch + 1)
        left = stream.next_below(size - patch + 1)
        img[top : top + patch, left : left + patch] = 1.0
    return RasterImage(img)


def patch_dataset(seed: int, n: int, size: int = 64) -> list:
    """Alternating-label samples; odd indices carry the bright patch."""
    samples = []
    for i in range(n):
        stream = prng.stream(seed, i)
        label = i % 2
        samples.append(train.Sample(label=label, image=patch_image(stream, label == 1, size)))
    return samples


# Normalization anchored at the patch brightness: the bright square maps to
# zero input, so its conv features sit next to the small-norm prototype
# init while textured background cells stay far away. This is what makes
# the task separable by construction.
PATCH_TASK_MEAN = (1.0, 1.0, 1.0)
PATCH_TASK_STD = (0.5, 0.5, 0.5)
