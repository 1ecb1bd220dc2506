"""Seeded, counter-based random streams.

Uniforms come from numpy's Philox bit generator; normals are produced with the
Box-Muller transform on that uniform stream so that the sampling recipe is
fixed by this module rather than by numpy's internal normal algorithm.
"""
from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """Deterministic random stream identified by an integer seed.

    >>> Rng(3).uniform((2,)).tolist() == Rng(3).uniform((2,)).tolist()
    True
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def fork(self, name: str) -> "Rng":
        """Independent child stream keyed by ``name``; does not advance self."""
        return Rng(self.seed, zlib.crc32(name.encode()) ^ (self.stream << 1))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = self._gen.random(shape)
        return (low + (high - low) * u).astype(np.float32)

    def _open_uniform(self, n: int) -> np.ndarray:
        # (0, 1] so that log() stays finite
        return 1.0 - self._gen.random(n)

    def standard_normal(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = self._open_uniform(half)
        u2 = self._gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z.reshape(shape)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return (mean + std * self.standard_normal(shape)).astype(np.float32)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal samples redrawn until they fall within ``bound`` standard deviations."""
        z = self.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (std * z).astype(np.float32)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
