"""Portable seeded random streams (xoshiro256** seeded through splitmix64).

Every stochastic stage of the toolkit draws from :class:`Rng` so that one
integer seed pins down the whole run on any platform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator.

    ``Rng(seed)`` expands the 64-bit seed into the 256-bit state with
    splitmix64, as recommended by the xoshiro authors.
    """

    __slots__ = ("_s",)

    def __init__(self, seed: int = 0):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state) -> "Rng":
        r = cls.__new__(cls)
        r._s = [int(v) & _MASK for v in state]
        return r

    @classmethod
    def substream(cls, seed: int, index: int) -> "Rng":
        """Independent stream for item ``index`` of a run seeded with ``seed``."""
        _, mixed = splitmix64((int(seed) ^ ((int(index) + 1) * _GOLDEN)) & _MASK)
        return cls(mixed)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) (Lemire's multiply-and-reject)."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        threshold = ((1 << 64) - n) % n
        while True:
            m = self.next_u64() * n
            if (m & _MASK) >= threshold:
                return m >> 64

    def normal(self) -> float:
        """Standard normal deviate (Box-Muller, one value per call)."""
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.normal() for _ in range(n)], dtype=np.float64).reshape(shape)

    def uniforms(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        u = np.array([self.uniform() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * u).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        p = list(range(n))
        self.shuffle(p)
        return p

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, m: int) -> list[int]:
        """``m`` distinct values from ``range(n)`` via a partial Fisher-Yates."""
        if m > n:
            raise ValueError(f"cannot sample {m} distinct values from {n}")
        pool = list(range(n))
        for i in range(m):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:m]
