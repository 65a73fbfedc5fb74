"""Discrete cadlag paths on a uniform grid and particle path-measures.

A path is a step function: omega(s) = v_k on [t_k, t_{k+1}) and omega(T) = v_M.
Stopping, bumping and concatenation are exact node operations in this
representation.  Every value object is immutable (read-only arrays).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

_SNAP_TOL = 1e-9


class DomainError(ValueError):
    """Argument outside the domain of an operation."""


class ShapeError(ValueError):
    """Incompatible grids, dimensions or ensemble sizes."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not (self.T > 0):
            raise DomainError(f"horizon must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 1:
            raise DomainError(f"step count must be an integer >= 1, got {self.M}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.T / self.M

    def index(self, t: float, strict: bool = False) -> int:
        """Grid index of time t.  Off-grid times snap to the nearest node
        unless strict is set."""
        t = float(t)
        if t < -_SNAP_TOL * self.T or t > self.T * (1 + _SNAP_TOL):
            raise DomainError(f"time {t} outside [0, {self.T}]")
        x = t / self.dt
        k = int(round(x))
        if strict and abs(x - k) > _SNAP_TOL * max(1.0, abs(x)):
            raise DomainError(f"time {t} is not a grid node (dt={self.dt})")
        return min(max(k, 0), self.M)

    def floor_index(self, t: float) -> int:
        """Index of the step containing t (cadlag convention)."""
        t = float(t)
        if t < -_SNAP_TOL * self.T or t > self.T * (1 + _SNAP_TOL):
            raise DomainError(f"time {t} outside [0, {self.T}]")
        return min(max(int(np.floor(t / self.dt + _SNAP_TOL)), 0), self.M)

    def cell_lengths(self, t: float) -> np.ndarray:
        """Length of [t_k, t_{k+1}) inside [0, t] for k = 0..M-1."""
        left = np.arange(self.M) * self.dt
        return np.clip(float(t) - left, 0.0, self.dt)


class DiscretePath:
    """Step path with values of shape (M+1, d)."""

    __slots__ = ("grid", "values")

    def __init__(self, grid: TimeGrid, values):
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != grid.M + 1:
            raise ShapeError(f"expected {grid.M + 1} nodes, got shape {v.shape}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", _frozen(v))

    def __setattr__(self, name, value):
        raise AttributeError("DiscretePath is immutable")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __call__(self, s: float) -> np.ndarray:
        return self.values[self.grid.floor_index(s)]

    def __eq__(self, other):
        return (isinstance(other, DiscretePath) and self.grid == other.grid
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"DiscretePath(M={self.grid.M}, d={self.d})"

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "DiscretePath":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(v, (grid.M + 1, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "DiscretePath":
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.nodes]))


class ParticleMeasure:
    """Uniformly weighted ensemble of paths, values of shape (N, M+1, d).

    Each particle carries an integer id; random streams are keyed by id so
    that permuting the ensemble permutes its noise with it.
    """

    __slots__ = ("grid", "values", "ids")

    def __init__(self, grid: TimeGrid, values, ids: Optional[Sequence[int]] = None):
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != grid.M + 1:
            raise ShapeError(f"expected (N, {grid.M + 1}, d) particles, got {v.shape}")
        if v.shape[0] < 1:
            raise ShapeError("a particle measure needs at least one particle")
        if ids is None:
            ids = np.arange(v.shape[0])
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (v.shape[0],) or len(np.unique(ids)) != len(ids) or ids.min() < 0:
            raise ShapeError("particle ids must be distinct non-negative integers, one per particle")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", _frozen(v))
        ids = ids.copy()
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __setattr__(self, name, value):
        raise AttributeError("ParticleMeasure is immutable")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def particles(self) -> list[DiscretePath]:
        return [DiscretePath(self.grid, p) for p in self.values]

    def __repr__(self):
        return f"ParticleMeasure(N={self.N}, M={self.grid.M}, d={self.d})"

    @classmethod
    def from_paths(cls, paths: Sequence[DiscretePath]) -> "ParticleMeasure":
        grid = paths[0].grid
        if any(p.grid != grid for p in paths):
            raise ShapeError("particles must share a grid")
        return cls(grid, np.stack([p.values for p in paths]))

    def permuted(self, perm) -> "ParticleMeasure":
        perm = np.asarray(perm)
        return ParticleMeasure(self.grid, self.values[perm], self.ids[perm])


@dataclass(frozen=True)
class Coupling:
    """Pairing used by w2_estimate.  index pairs particle i with particle i;
    sorted-1d compares the real marginal at node `k` (default terminal)."""
    mode: Literal["index", "sorted-1d"] = "index"
    k: Optional[int] = None
    description: str = field(default="", compare=False)


# --- array-level helpers used throughout the package ------------------------

def stop_array(values: np.ndarray, k: int) -> np.ndarray:
    """Stop paths (..., M+1, d) at node k."""
    out = np.array(values, copy=True)
    out[..., k + 1:, :] = out[..., k:k + 1, :]
    return out


def bump_array(values: np.ndarray, j: int, x) -> np.ndarray:
    out = np.array(values, dtype=float, copy=True)
    out[..., j:, :] += np.asarray(x, dtype=float)
    return out


# --- operations ---------------------------------------------------------------

def stop_path(omega: DiscretePath, t: float, strict: bool = False) -> DiscretePath:
    k = omega.grid.index(t, strict=strict)
    return DiscretePath(omega.grid, stop_array(omega.values, k))


def stop_measure(mu: ParticleMeasure, t: float, strict: bool = False) -> ParticleMeasure:
    k = mu.grid.index(t, strict=strict)
    return ParticleMeasure(mu.grid, stop_array(mu.values, k), mu.ids)


def bump_path(omega: DiscretePath, tau: float, x, strict: bool = True) -> DiscretePath:
    j = omega.grid.index(tau, strict=strict)
    x = np.broadcast_to(np.asarray(x, dtype=float), (omega.d,))
    return DiscretePath(omega.grid, bump_array(omega.values, j, x))


def bump_particle(mu: ParticleMeasure, i: int, tau: float, x, strict: bool = True) -> ParticleMeasure:
    """Bump particle i of mu by x on [tau, T]."""
    j = mu.grid.index(tau, strict=strict)
    v = np.array(mu.values, copy=True)
    v[i, j:, :] += np.broadcast_to(np.asarray(x, dtype=float), (mu.d,))
    return ParticleMeasure(mu.grid, v, mu.ids)


def concat_path(gamma: DiscretePath, omega: DiscretePath, t: float, strict: bool = False) -> DiscretePath:
    """gamma_t + (omega - omega(t)) 1_[t,T]."""
    if gamma.grid != omega.grid or gamma.d != omega.d:
        raise ShapeError("concat_path needs paths on the same grid and dimension")
    k = gamma.grid.index(t, strict=strict)
    v = np.array(gamma.values, copy=True)
    v[k:] = gamma.values[k] + (omega.values[k:] - omega.values[k])
    return DiscretePath(gamma.grid, v)


def sup_norm(omega: DiscretePath, window: Optional[tuple[float, float]] = None) -> float:
    a, b = (0.0, omega.grid.T) if window is None else window
    if a > b:
        raise DomainError(f"empty window [{a}, {b}]")
    ka, kb = omega.grid.index(a), omega.grid.index(b)
    seg = omega.values[ka:kb + 1]
    return float(np.max(np.linalg.norm(seg, axis=-1)))


def sup_norms(values: np.ndarray) -> np.ndarray:
    """Sup norms of an ensemble (N, M+1, d)."""
    return np.max(np.linalg.norm(values, axis=-1), axis=-1)


def measure_moment(mu: ParticleMeasure) -> float:
    return float(np.sqrt(np.mean(sup_norms(mu.values) ** 2)))


def w1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two equal-size empirical laws on the reals."""
    a = np.sort(np.ravel(a))
    b = np.sort(np.ravel(b))
    if a.shape != b.shape:
        raise ShapeError("sorted W2 needs equal sample sizes")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def w2_estimate(mu: ParticleMeasure, nu: ParticleMeasure, c: Coupling = Coupling()) -> float:
    if mu.grid != nu.grid or mu.d != nu.d:
        raise ShapeError("measures live on different grids")
    if c.mode == "index":
        if mu.N != nu.N:
            raise ShapeError("index coupling needs equal particle counts")
        diff = sup_norms(mu.values - nu.values)
        return float(np.sqrt(np.mean(diff ** 2)))
    if c.mode == "sorted-1d":
        if mu.d != 1:
            raise ShapeError("sorted-1d coupling needs d = 1")
        k = mu.grid.M if c.k is None else c.k
        return w1d(mu.values[:, k, 0], nu.values[:, k, 0])
    raise DomainError(f"unknown coupling mode {c.mode!r}")
