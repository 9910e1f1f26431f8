"""Deterministic, platform-independent pseudo-random numbers.

Everything stochastic in this package (corpus synthesis, weight init,
segment/batch sampling, evaluation subsampling) draws from SplitMix64 so
that a (config, seed) pair reproduces bit-identical results on any
machine. Gaussians come from Box-Muller; the cosine branch is returned
first and the sine branch cached for the next call.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """One SplitMix64 output step applied to ``x`` as raw state."""
    z = (x + _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a substream (e.g. one per video_id)."""
    return mix64((seed ^ stream) & _MASK64)


class SplitMix64:
    """SplitMix64 generator with uniform/Gaussian/integer helpers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._gauss_cache: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is < n / 2**64, accepted for determinism."""
        if n <= 0:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return self.next_u64() % n

    def randrange(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.randint(hi - lo + 1)

    def gauss(self) -> float:
        """Standard normal via Box-Muller (cos branch first, sin branch cached)."""
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]: keeps log() finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_cache = r * math.sin(theta)
        return r * math.cos(theta)

    def gauss_vector(self, n: int) -> list[float]:
        return [self.gauss() for _ in range(n)]

    def coin(self, p: float) -> bool:
        """True with probability p."""
        return self.uniform() < p

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]

    def sample_distribution(self, probs) -> int:
        """Index sampled from a probability vector (inverse CDF walk)."""
        u = self.uniform()
        acc = 0.0
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        return len(probs) - 1
