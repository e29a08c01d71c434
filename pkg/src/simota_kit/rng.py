"""SplitMix64 random stream with named child streams.

Every random draw site asks for its own child stream by name, so adding a
draw in one place never shifts the values seen by another.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class SplitMix64:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = seed & MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def child(self, name: str) -> "SplitMix64":
        """Independent stream derived from the seed (not the state) and a name."""
        return SplitMix64(_mix(self.seed ^ _fnv1a64(name)))

    def random(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        if lo == hi:
            return float(lo)
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError("empty range")
        n = hi - lo + 1
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % n

    def normal(self) -> float:
        # Box-Muller, one value per call so the draw count stays fixed
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def numpy_seed(self) -> int:
        """A 63-bit seed for handing a stream over to numpy generators."""
        return self.next_u64() >> 1
