"""Seeded, splittable random streams."""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE

ALGORITHM = "philox4x64"

_UNIFORM_BITS = 16
_LOGISTIC_BITS = 24


class RngState:
    """A counter-based Philox stream identified by ``seed`` and a spawn path.

    Child streams from :meth:`split` are independent of the parent and of
    each other, and do not advance the parent.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"

    def split(self, *keys: int) -> "RngState":
        return RngState(self.seed, self.path + tuple(keys))

    def uniform_noise(self, shape) -> np.ndarray:
        """Samples strictly inside (-0.5, 0.5) on a 2**-16 grid, symmetric about zero."""
        k = self._gen.integers(0, 1 << _UNIFORM_BITS, size=shape, dtype=np.uint32)
        return ((k.astype(DTYPE) + DTYPE(0.5)) / DTYPE(1 << _UNIFORM_BITS) - DTYPE(0.5)).astype(DTYPE)

    def logistic(self, shape) -> np.ndarray:
        """Standard logistic samples (difference of two Gumbels)."""
        k = self._gen.integers(0, 1 << _LOGISTIC_BITS, size=shape, dtype=np.uint32)
        u = (k.astype(np.float64) + 0.5) / float(1 << _LOGISTIC_BITS)
        return (np.log(u) - np.log1p(-u)).astype(DTYPE)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * scale).astype(DTYPE)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)
