"""Standard bump mollifier and the mollified functionals built from it."""
from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from ..funcalc.dsl import DoubleMollified, FunctionalSpec, MeasureIntegral, RunningIntegral
from ..funcalc.smooth import Affine, SmoothMap
from ..pathspace import DomainError, TimeGrid

log = logging.getLogger(__name__)

QUAD_TOL = 1e-12


def _bump(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


@lru_cache(maxsize=1)
def _bump_mass() -> float:
    return quad(lambda x: float(_bump(x)), -1.0, 1.0, epsabs=QUAD_TOL, epsrel=QUAD_TOL)[0]


class Mollifier:
    """rho_eps(t0 - s) as a kernel in s, with rho(x) = c exp(-1/(1-x^2)) on (-1, 1).

    masses(grid, t)[k] is the integral of the kernel over [t_k, t_{k+1}) cut
    at t; full-cell masses are computed once per grid by adaptive quadrature.
    When the support (t0 - eps, t0 + eps) leaves [0, T] the masses are
    renormalised to total one on [0, T], with a warning.
    """

    def __init__(self, t0: float, eps: float, T: float = None):
        if not eps > 0:
            raise DomainError(f"mollifier width must be positive, got {eps}")
        self.t0 = float(t0)
        self.eps = float(eps)
        self.T = None if T is None else float(T)
        self.c = 1.0 / _bump_mass()
        self._cells = {}

    def __repr__(self):
        return f"Mollifier(t0={self.t0}, eps={self.eps})"

    def __eq__(self, other):
        return isinstance(other, Mollifier) and (self.t0, self.eps) == (other.t0, other.eps)

    def __hash__(self):
        return hash((Mollifier, self.t0, self.eps))

    @property
    def support(self):
        return self.t0 - self.eps, self.t0 + self.eps

    def rho(self, x):
        """rho_eps(x)."""
        return self.c * _bump(np.asarray(x, dtype=float) / self.eps) / self.eps

    def density(self, s):
        """Kernel value rho_eps(t0 - s), renormalised like the masses."""
        return float(self.rho(self.t0 - float(s))) / self.norm()

    def norm(self) -> float:
        """Kernel mass inside [0, T] (one when the support fits)."""
        lo, hi = self.support
        if self.T is None or (lo >= 0.0 and hi <= self.T):
            return 1.0
        total = self._raw(0.0, self.T)
        if total <= 0.0:
            raise DomainError(f"mollifier support ({lo}, {hi}) misses [0, {self.T}]")
        return total

    def _raw(self, a: float, b: float) -> float:
        lo, hi = max(a, self.support[0]), min(b, self.support[1])
        if hi <= lo:
            return 0.0
        return quad(lambda s: float(self.rho(self.t0 - s)), lo, hi, epsabs=QUAD_TOL, epsrel=QUAD_TOL,
                    limit=200)[0]

    def _grid_cells(self, grid: TimeGrid):
        if self.T is None:
            self.T = grid.T
        elif abs(self.T - grid.T) > 1e-12:
            raise DomainError(f"mollifier built for T={self.T}, used on a grid with T={grid.T}")
        hit = self._cells.get(grid)
        if hit is None:
            m = np.array([self._raw(grid.time(k), grid.time(k + 1)) for k in range(grid.M)])
            norm = self.norm()
            if norm != 1.0:
                lo, hi = self.support
                log.warning("mollifier support (%.6g, %.6g) leaks outside [0, %g]; retained mass %.12g "
                            "renormalised to one", lo, hi, grid.T, norm)
            hit = self._cells[grid] = (m / norm, norm)
        return hit

    def masses(self, grid: TimeGrid, t: float) -> np.ndarray:
        full, norm = self._grid_cells(grid)
        t = float(t)
        out = full.copy()
        k = grid.floor_index(t)
        if k < grid.M:
            out[k + 1:] = 0.0
            left = grid.time(k)
            out[k] = self._raw(left, t) / norm if t > left else 0.0
        return out

    def tail_mass(self, grid: TimeGrid, t: float) -> float:
        """Kernel mass on [t, T]."""
        return float(self._grid_cells(grid)[0].sum() - self.masses(grid, t).sum())


def _check_center(t0, eps, T=None):
    if T is not None and not 0 < t0 < T:
        raise DomainError(f"need 0 < t0 < T, got t0={t0}, T={T}")
    if T is not None and eps >= min(t0, T - t0):
        log.warning("eps=%g >= min(t0, T - t0); the kernel support leaves [0, T]", eps)


def mollify_terminal(F: SmoothMap, t0: float, eps: float, measure: bool = False,
                     T: float = None) -> FunctionalSpec:
    """int_0^T rho_eps(t0 - s) F(omega(s)) ds, or E^mu of it with measure=True."""
    _check_center(t0, eps, T)
    k = Mollifier(t0, eps, T)
    leaf = MeasureIntegral(F, kernel=k) if measure else RunningIntegral(F, kernel=k)
    return FunctionalSpec(Affine([1.0]), [leaf], name=f"mollified({t0}, {eps})")


def mollify_generator(g: SmoothMap, t0: float, eps: float, T: float = None) -> FunctionalSpec:
    """f_eps(t, omega, mu) = int_0^t int_0^t g(omega(r1), E^mu[W(r2)]) rho(t0-r1) rho(t0-r2) dr1 dr2."""
    _check_center(t0, eps, T)
    return FunctionalSpec(Affine([1.0]), [DoubleMollified(g, Mollifier(t0, eps, T))],
                          name=f"mollified-source({t0}, {eps})")


class PointMass:
    """Unit mass at the node carrying t0: the eps -> 0 limit of Mollifier,
    so int F(omega(s)) PointMass(ds) = F(omega(t0)) for on-grid t0."""

    def __init__(self, t0: float):
        self.t0 = float(t0)
        self.eps = 0.0

    def __repr__(self):
        return f"PointMass(t0={self.t0})"

    def __eq__(self, other):
        return isinstance(other, PointMass) and self.t0 == other.t0

    def __hash__(self):
        return hash((PointMass, self.t0))

    def density(self, s):
        return 0.0

    def masses(self, grid: TimeGrid, t: float) -> np.ndarray:
        out = np.zeros(grid.M)
        k0 = grid.index(self.t0, strict=True)
        if k0 == grid.M:
            raise DomainError("point mass at T has no cell")
        if t > grid.time(k0):
            out[k0] = 1.0
        return out

    def tail_mass(self, grid: TimeGrid, t: float) -> float:
        return float(1.0 - self.masses(grid, t).sum())
