"""Seeded random streams.

Streams use numpy's Philox-4x64 counter-based bit generator. A stream is
named by a root seed plus an integer path (e.g. ``(seed, PURPOSE_DATA, step)``),
so any step's randomness can be regenerated without replaying earlier draws.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-10"


class RandomStream:
    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        # SeedSequence hashing is specified independently of platform.
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path: int) -> "RandomStream":
        return RandomStream(self.seed, *self.path, *path)

    def uniform(self, shape=(), low=0.0, high=1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def open_uniform(self, shape=()) -> np.ndarray:
        """Uniform on the open interval (0, 1)."""
        u = self._gen.random(shape)
        return np.where(u == 0.0, np.finfo(np.float64).tiny, u)

    def normal(self, shape=(), std=1.0) -> np.ndarray:
        return std * self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gumbel(self, shape=()) -> np.ndarray:
        """Standard Gumbel(0, 1) noise via -log(-log(u))."""
        return -np.log(-np.log(self.open_uniform(shape)))

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path={self.path}, algorithm={ALGORITHM!r})"
