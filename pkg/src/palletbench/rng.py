"""splitmix64 pseudo-random streams.

Every random draw in the toolkit flows through this module so that a seed
produces bit-identical results on any platform. The algorithm is implemented
directly (not delegated to a library RNG) because the exact stream is part of
the reproducibility contract of the darkening, scene-generation, and mock
detector outputs.
"""

from __future__ import annotations

from typing import Sequence

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

TWO_PI = 6.283185307179586


def mix64(z: int) -> int:
    """Finalizer: avalanche a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic 64-bit stream seeded with one integer."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & MASK64
        return mix64(self._state)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 53 significant bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def next_below(self, n: int) -> int:
        """Draw in [0, n) by modulo reduction (the pinned convention)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def next_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        return lo + self.next_below(hi - lo + 1)

    def next_uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def choice_weighted(self, weights: Sequence[float]) -> int:
        """Index drawn proportionally to non-negative weights."""
        total = float(sum(weights))
        if total <= 0.0:
            raise ValueError("weights must sum to a positive value")
        u = self.next_float() * total
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1


def seed_stream(master_seed: int, count: int) -> list[int]:
    """First `count` values of the stream — used to derive per-item seeds."""
    s = SplitMix64(master_seed)
    return [s.next_u64() for _ in range(count)]


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed to obtain an independent sub-stream seed."""
    out = SplitMix64(seed).next_u64()
    for k in keys:
        out = SplitMix64(out ^ (k & MASK64)).next_u64()
    return out
