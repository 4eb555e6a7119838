"""Deterministic random streams built on SplitMix64.

Every stochastic choice in the pipeline (augmentation draws, weight init,
epoch shuffles) comes from a SplitMix64 stream, so runs are bit-reproducible
and the generator is trivial to port for cross-implementation checks.

Constants are the canonical ones (Steele, Lea & Flood 2014):
increment 0x9E3779B97F4A7C15, mix multipliers 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB, shift distances 30/27/31.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _finalize(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """SplitMix64 generator over a 64-bit state."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        return _finalize(self.state)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform double in [lo, hi)."""
        return lo + (hi - lo) * self.next_float()

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is < n / 2**64, irrelevant here."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes exactly two draws."""
        u1 = self.next_float()
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]


def mix(*parts: int) -> int:
    """Collapse integer parts into one 64-bit seed.

    Length-prefixed and folded through the SplitMix64 finalizer, so e.g.
    (seed, epoch, index) triples give streams independent of one another
    and of shorter derivations sharing a prefix.
    """
    acc = len(parts) & MASK64
    for p in parts:
        acc = _finalize((acc + _GOLDEN + (p & MASK64)) & MASK64)
    return acc


def stream(*parts: int) -> SplitMix64:
    """Stream seeded by ``mix(*parts)``."""
    return SplitMix64(mix(*parts))
