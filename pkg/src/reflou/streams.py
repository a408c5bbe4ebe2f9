"""Per-path counter-based random streams.

Every path owns Philox generators keyed by ``(seed, path_index, purpose)``,
so its randomness does not depend on how paths are batched or scheduled.
"""
from __future__ import annotations

import numpy as np

NOISE, UNIFORM, BRIDGE, START = range(4)


def path_generator(seed: int, index: int, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


class PathStreams:
    """Block-buffered Gaussian and uniform draws for a batch of paths."""

    def __init__(self, seed: int, indices, dim: int, n_uniform: int = 0, block: int = 512):
        self.seed = int(seed)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.dim = int(dim)
        self.n_uniform = int(n_uniform)
        self.block = int(block)
        n = len(self.indices)
        self._noise = [path_generator(seed, i, NOISE) for i in self.indices]
        self._unif = [path_generator(seed, i, UNIFORM) for i in self.indices] if n_uniform else []
        self._bridge = {}
        self._zbuf = np.empty((self.block, n, self.dim))
        self._ubuf = np.empty((self.block, n, max(self.n_uniform, 1)))
        self._pos = self.block

    def __len__(self):
        return len(self.indices)

    def _refill(self):
        for k, gen in enumerate(self._noise):
            self._zbuf[:, k, :] = gen.standard_normal((self.block, self.dim))
        for k, gen in enumerate(self._unif):
            self._ubuf[:, k, :] = gen.random((self.block, self.n_uniform))
        self._pos = 0

    def next(self):
        """Standard normals ``(n, d)`` and uniforms ``(n, n_uniform)`` for one step."""
        if self._pos == self.block:
            self._refill()
        z = self._zbuf[self._pos]
        u = self._ubuf[self._pos]
        self._pos += 1
        return z, u

    def bridge_normals(self, local_index: int, shape) -> np.ndarray:
        """Extra normals for one path, drawn only when a step is subdivided."""
        gen = self._bridge.get(local_index)
        if gen is None:
            gen = self._bridge[local_index] = path_generator(
                self.seed, self.indices[local_index], BRIDGE)
        return gen.standard_normal(shape)


def start_generator(seed: int, index: int) -> np.random.Generator:
    return path_generator(seed, index, START)
