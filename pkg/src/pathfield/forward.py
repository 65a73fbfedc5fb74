"""Deterministic-coefficient diffusions and Euler-Maruyama ensembles.

Gaussian increments are drawn from a table keyed by (stream, row, step):
rows are generated in fixed blocks, each from its own SeedSequence child, so
the numbers a particle receives depend only on (seed, stream, row id, M) and
never on the ensemble size or the thread count.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .parallel import pmap
from .pathspace import DiscretePath, ParticleMeasure, TimeGrid, ShapeError

BLOCK = 256
Coef = Union[float, np.ndarray, Callable[[float], np.ndarray]]


def _as_fn(c: Coef, d: int, matrix: bool):
    if callable(c):
        return lambda t: np.asarray(c(t), dtype=float).reshape((d, d) if matrix else (d,))
    a = np.asarray(c, dtype=float)
    if matrix:
        a = a * np.eye(d) if a.ndim == 0 else a.reshape(d, d)
    else:
        a = np.broadcast_to(a, (d,)).copy()
    return lambda t: a


@dataclass(frozen=True)
class DiffusionCoeffs:
    """dX = b1 dt + sigma1 dB for the path argument, dX' = b2 dt + sigma2 dB'
    for the measure argument.  Scalars broadcast (sigma as a multiple of I)."""
    b1: Coef = 0.0
    sigma1: Coef = 1.0
    b2: Coef = 0.0
    sigma2: Coef = 1.0
    d: int = 1

    def drift(self, which: int, t: float) -> np.ndarray:
        return _as_fn(self.b1 if which == 1 else self.b2, self.d, False)(t)

    def diffusion(self, which: int, t: float) -> np.ndarray:
        return _as_fn(self.sigma1 if which == 1 else self.sigma2, self.d, True)(t)

    def check(self, grid: TimeGrid, bound: float = 1e6):
        for k in range(grid.M + 1):
            t = grid.time(k)
            for w in (1, 2):
                if not (np.all(np.isfinite(self.drift(w, t))) and np.all(np.isfinite(self.diffusion(w, t)))):
                    raise ValueError(f"non-finite coefficient at t={t}")
                if np.abs(self.drift(w, t)).max() > bound or np.abs(self.diffusion(w, t)).max() > bound:
                    raise ValueError(f"coefficient exceeds bound {bound} at t={t}")

    @classmethod
    def standard(cls, d: int = 1) -> "DiffusionCoeffs":
        return cls(0.0, 1.0, 0.0, 1.0, d)


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def gaussian_table(seed: int, stream: str, rows, M: int, d: int) -> np.ndarray:
    """Standard normals of shape (len(rows), M, d) for the given row ids."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return np.zeros((0, M, d))
    blocks = np.unique(rows // BLOCK)
    key = stream_key(stream)

    def gen(b):
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key, int(b), int(M)))
        return np.random.default_rng(ss).standard_normal((BLOCK, M, d))

    tables = dict(zip(blocks.tolist(), pmap(gen, blocks.tolist())))
    out = np.empty((rows.size, M, d))
    for b, tab in tables.items():
        sel = np.nonzero(rows // BLOCK == b)[0]
        out[sel] = tab[rows[sel] % BLOCK]
    return out


@dataclass
class Ensemble:
    """Simulated paths (N, M+1, d) with Brownian increments dB (N, M, d).

    k0 is the start node; increments before k0 are zero.  source[i] is the
    index of the seed path (row of mu) particle i started from.
    """
    grid: TimeGrid
    paths: np.ndarray
    dB: np.ndarray
    k0: int
    source: np.ndarray
    rows: np.ndarray
    stream: str

    @property
    def N(self):
        return self.paths.shape[0]

    def measure(self) -> ParticleMeasure:
        return ParticleMeasure(self.grid, self.paths, self.rows)


def _euler(grid, start: np.ndarray, k0: int, coeffs: DiffusionCoeffs, which: int, xi: np.ndarray):
    N, _, d = start.shape
    dt = grid.dt
    paths = np.array(start, dtype=float, copy=True)
    dB = np.zeros((N, grid.M, d))
    dB[:, k0:] = np.sqrt(dt) * xi[:, k0:]
    for k in range(k0, grid.M):
        t = grid.time(k)
        b = coeffs.drift(which, t)
        s = coeffs.diffusion(which, t)
        paths[:, k + 1] = paths[:, k] + b * dt + dB[:, k] @ s.T
    return paths, dB


def simulate_forward(coeffs: DiffusionCoeffs, gamma: DiscretePath, t: float, N: int, seed: int,
                     stream: str = "gamma", which: int = 1, first_row: int = 0) -> Ensemble:
    """N copies of X^{gamma_t}: equal to gamma on [0, t], Euler-Maruyama after."""
    grid = gamma.grid
    if gamma.d != coeffs.d:
        raise ShapeError(f"path dimension {gamma.d} != coefficient dimension {coeffs.d}")
    k0 = grid.index(t)
    start = np.repeat(gamma.values[None], N, axis=0)
    start[:, k0:] = gamma.values[k0]
    rows = np.arange(first_row, first_row + N)
    xi = gaussian_table(seed, stream, rows, grid.M, coeffs.d)
    paths, dB = _euler(grid, start, k0, coeffs, which, xi)
    return Ensemble(grid, paths, dB, k0, np.zeros(N, dtype=np.int64), rows, stream)


def simulate_from_measure(coeffs: DiffusionCoeffs, mu: ParticleMeasure, t: float, N: Optional[int],
                          seed: int, stream: str = "eta", which: int = 2) -> Ensemble:
    """N paths B^{eta_t} with eta drawn from mu by tiling its particles.

    Row r uses particle r mod N_mu; its noise row is copy * (max id + 1) + id,
    so permuting mu permutes the ensemble without changing it as a multiset.
    """
    grid = mu.grid
    if mu.d != coeffs.d:
        raise ShapeError(f"measure dimension {mu.d} != coefficient dimension {coeffs.d}")
    N = mu.N if N is None else int(N)
    k0 = grid.index(t)
    src = np.arange(N) % mu.N
    copy = np.arange(N) // mu.N
    rows = copy * (int(mu.ids.max()) + 1) + mu.ids[src]
    start = np.array(mu.values[src], copy=True)
    start[:, k0:] = start[:, k0:k0 + 1]
    xi = gaussian_table(seed, stream, rows, grid.M, coeffs.d)
    paths, dB = _euler(grid, start, k0, coeffs, which, xi)
    return Ensemble(grid, paths, dB, k0, src, rows, stream)
