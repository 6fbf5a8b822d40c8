"""Seeded counter-based randomness shared by every stochastic stage.

All randomness in the package flows from one root seed.  Each stage derives
its own child stream from ``(seed, label, index)``, so replaying a pipeline
with the same seed reproduces every draw regardless of what other stages do.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """Deterministic random stream backed by the counter-based Philox engine."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) for k in _spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str, index: int = 0) -> "Rng":
        """Derive an independent stream for one purpose.

        The same (seed, label, index) always yields the same stream.
        """
        return Rng(self.seed, self._spawn_key + (zlib.crc32(label.encode("utf-8")), index))

    def normal(self, shape=None, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, options, shape=None):
        return self._gen.choice(options, size=shape)

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, spawn_key={self._spawn_key})"
