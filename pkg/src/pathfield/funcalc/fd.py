"""Finite-difference derivative estimators and the public funcalc operations."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid, stop_array
from .dsl import DerivativeBundle, Functional, FunctionalSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FdConfig:
    """Finite-difference steps.  None means the relative default:
    h1 = 1e-4 (1+|omega(t)|), h2 = 1e-3 (1+|omega(t)|), lift_eps = 1e-4 (1+|||mu|||),
    lift_eps2 = 1e-3 (1+|||mu|||), h_t = 1e-6 T."""
    h1: Optional[float] = None
    h2: Optional[float] = None
    h_t: Optional[float] = None
    lift_eps: Optional[float] = None
    lift_eps2: Optional[float] = None
    richardson: bool = True

    def __post_init__(self):
        for name in ("h1", "h2", "h_t", "lift_eps", "lift_eps2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise DomainError(f"FD step {name} must be positive, got {v}")

    def steps_path(self, x_t: np.ndarray, order: int) -> np.ndarray:
        """Per-sample steps for x_t of shape (B, d)."""
        scale = 1.0 + np.linalg.norm(x_t, axis=-1)
        fixed, rel = (self.h1, 1e-4) if order == 1 else (self.h2, 1e-3)
        return np.full(scale.shape, fixed) if fixed is not None else rel * scale

    def step_lift(self, measure: np.ndarray, order: int) -> float:
        fixed, rel = (self.lift_eps, 1e-4) if order == 1 else (self.lift_eps2, 1e-3)
        if fixed is not None:
            return fixed
        mom = float(np.sqrt(np.mean(np.max(np.linalg.norm(measure, axis=-1), axis=-1) ** 2)))
        return rel * (1.0 + mom)

    def step_time(self, grid: TimeGrid) -> float:
        h = self.h_t if self.h_t is not None else 1e-6 * grid.T
        if h > grid.dt * (1 + 1e-12):
            raise DomainError(f"h_t={h} exceeds the grid step {grid.dt}")
        return h


# --- batch estimators -----------------------------------------------------------

def fd_dt(f: Functional, grid, t, paths, measure, cfg: FdConfig):
    h = cfg.step_time(grid)
    if t + h > grid.T * (1 + 1e-12):
        raise DomainError("forward horizontal difference needs t + h_t <= T")
    k = grid.floor_index(t)
    P = stop_array(paths, k)
    Mu = None if measure is None else stop_array(measure, k)
    return (f.value(grid, t + h, P, Mu) - f.value(grid, t, P, Mu)) / h


def fd_d_omega(f: Functional, grid, j, t, paths, measure, cfg: FdConfig, order=1):
    """Central differences in the bump omega + x 1_[t_j, T], per coordinate."""
    B, _, d = paths.shape
    k = grid.floor_index(t)
    h = cfg.steps_path(paths[:, k, :], order)

    def fb(shift):                     # shift (B, d)
        P = np.array(paths, copy=True)
        P[:, j:, :] += shift[:, None, :]
        return f.value(grid, t, P, measure)

    E = np.eye(d)
    if order == 1:
        out = np.empty((B, d))
        for a in range(d):
            s = h[:, None] * E[a]
            out[:, a] = (fb(s) - fb(-s)) / (2 * h)
        return out
    f0 = f.value(grid, t, paths, measure)
    out = np.empty((B, d, d))
    for a in range(d):
        s = h[:, None] * E[a]
        out[:, a, a] = (fb(s) - 2 * f0 + fb(-s)) / h ** 2
        for b in range(a):
            u = h[:, None] * E[b]
            v = (fb(s + u) - fb(s - u) - fb(-s + u) + fb(-s - u)) / (4 * h ** 2)
            out[:, a, b] = out[:, b, a] = v
    return out


def fd_d_mu(f: Functional, grid, j, t, paths, measure, i, cfg: FdConfig, order=1,
            flag_tol=0.1):
    """Particle-lift estimate of d_mu f (order 1) or d_x~ d_mu f (order 2) at
    particle i: N [f(mu with particle i bumped at tau) - f(mu)] / eps."""
    N, _, d = measure.shape
    eps = cfg.step_lift(measure, order)

    def fm(shift):
        Mu = np.array(measure, copy=True)
        Mu[i, j:, :] += shift
        return f.value(grid, t, paths, Mu)

    f0 = f.value(grid, t, paths, measure)
    E = np.eye(d)
    if order == 1:
        out = np.empty((paths.shape[0], d))
        for a in range(d):
            fp, fmn = fm(eps * E[a]), fm(-eps * E[a])
            fwd = N * (fp - f0) / eps
            bwd = N * (f0 - fmn) / eps
            cen = 0.5 * (fwd + bwd)
            if np.any(np.abs(fwd - bwd) > flag_tol * (1 + np.abs(cen))):
                log.warning("particle-lift step %.3g leaves the smooth region at particle %d", eps, i)
            out[:, a] = cen if cfg.richardson else fwd
        return out
    out = np.empty((paths.shape[0], d, d))
    for a in range(d):
        s = eps * E[a]
        out[:, a, a] = N * (fm(s) - 2 * f0 + fm(-s)) / eps ** 2
        for b in range(a):
            u = eps * E[b]
            v = N * (fm(s + u) - fm(s - u) - fm(-s + u) + fm(-s - u)) / (4 * eps ** 2)
            out[:, a, b] = out[:, b, a] = v
    return out


def fd_bundle(f: Functional, grid, j, t, paths, measure, cfg: FdConfig, with_measure=True,
              order=2, want_dt=True) -> DerivativeBundle:
    """Bundle by finite differences; measure kernels at the measure's own particles."""
    val = f.value(grid, t, paths, measure)
    b = DerivativeBundle(tau=grid.time(j), t=t, value=val, modes={})
    b.dt = fd_dt(f, grid, t, paths, measure, cfg) if (want_dt and t < grid.T) else None
    b.d_omega = fd_d_omega(f, grid, j, t, paths, measure, cfg, 1)
    b.d2_omega = fd_d_omega(f, grid, j, t, paths, measure, cfg, 2) if order >= 2 else None
    b.modes = {"dt": "fd", "d_omega": "fd", "d_mu": "fd"}
    if with_measure and measure is not None and f.uses_measure:
        N = measure.shape[0]
        K1 = np.stack([fd_d_mu(f, grid, j, t, paths, measure, i, cfg, 1) for i in range(N)], axis=1)
        K2 = (np.stack([fd_d_mu(f, grid, j, t, paths, measure, i, cfg, 2) for i in range(N)], axis=1)
              if order >= 2 else None)
        b.mu_terms = [(np.ones(paths.shape[0]), K1, K2)]
        b.n_tilde = N
    return b


def batch_bundle(f: Functional, grid, j, t, paths, measure=None, tilde=None, order=2,
                 cfg: Optional[FdConfig] = None, want_dt=True) -> DerivativeBundle:
    """Analytic bundle for DSL functionals, FD bundle otherwise."""
    if isinstance(f, FunctionalSpec):
        return f.bundle(grid, j, t, paths, measure, tilde, order=order, want_dt=want_dt)
    if tilde is not None and measure is not None and not np.shares_memory(tilde, measure) \
            and not np.array_equal(tilde, measure):
        raise ValueError("finite-difference measure kernels exist only at the measure's own particles")
    log.warning("functional %r has no analytic bundle; using finite differences", f)
    return fd_bundle(f, grid, j, t, paths, measure, cfg or FdConfig(),
                     with_measure=tilde is not None, order=order, want_dt=want_dt)


# --- public single-point operations ----------------------------------------------

def _args(t, omega: DiscretePath, mu: Optional[ParticleMeasure], strict):
    grid = omega.grid
    k = grid.index(t, strict=strict)
    P = omega.values[None]
    Mu = None if mu is None else mu.values
    if mu is not None and mu.grid != grid:
        raise DomainError("path and measure live on different grids")
    return grid, k, P, Mu


def eval_functional(f: Functional, t: float, omega: DiscretePath,
                    mu: Optional[ParticleMeasure] = None, strict: bool = False) -> float:
    grid, k, P, Mu = _args(t, omega, mu, strict)
    P = stop_array(P, k)
    Mu = None if Mu is None else stop_array(Mu, k)
    out = f.value(grid, grid.time(k), P, Mu)
    return float(np.asarray(out).reshape(-1)[0])


def horizontal_derivative(f: Functional, t, omega, mu=None, cfg: Optional[FdConfig] = None,
                          mode: str = "auto") -> float:
    grid, k, P, Mu = _args(t, omega, mu, False)
    tk = grid.time(k)
    if mode == "fd" or (mode == "auto" and not isinstance(f, FunctionalSpec)):
        if k == grid.M:
            raise DomainError("forward horizontal difference undefined at t = T")
        return float(fd_dt(f, grid, tk, P, Mu, cfg or FdConfig())[0])
    P = stop_array(P, k)
    Mu = None if Mu is None else stop_array(Mu, k)
    return float(f.bundle(grid, k, tk, P, Mu, order=1).dt[0])


def strong_vertical_derivative(f: Functional, tau, t, omega, mu=None, order: int = 1,
                               mode: str = "analytic", cfg: Optional[FdConfig] = None):
    grid, k, P, Mu = _args(t, omega, mu, False)
    j = grid.index(tau, strict=False)
    if j > k:
        raise DomainError(f"cut-off tau={tau} after t={t}")
    if order not in (1, 2):
        raise DomainError("order must be 1 or 2")
    tk = grid.time(k)
    if mode == "analytic" and isinstance(f, FunctionalSpec):
        b = f.bundle(grid, j, tk, P, Mu, order=order, want_dt=False)
        return (b.d_omega if order == 1 else b.d2_omega)[0]
    if mode == "analytic":
        log.warning("no analytic SVD for %r; using finite differences", f)
    return fd_d_omega(f, grid, j, tk, P, Mu, cfg or FdConfig(), order)[0]


def measure_derivative(f: Functional, tau, t, omega, mu: ParticleMeasure, which_particle: int,
                       order: int = 1, mode: str = "analytic", cfg: Optional[FdConfig] = None):
    grid, k, P, Mu = _args(t, omega, mu, False)
    j = grid.index(tau, strict=False)
    if j > k:
        raise DomainError(f"cut-off tau={tau} after t={t}")
    if not 0 <= which_particle < mu.N:
        raise DomainError(f"particle index {which_particle} outside 0..{mu.N - 1}")
    tk = grid.time(k)
    if mode == "analytic" and isinstance(f, FunctionalSpec):
        tilde = Mu[which_particle:which_particle + 1]
        b = f.bundle(grid, j, tk, P, Mu, tilde, order=order, want_dt=False)
        return (b.d_mu() if order == 1 else b.d2_mu())[0, 0]
    return fd_d_mu(f, grid, j, tk, P, Mu, which_particle, cfg or FdConfig(), order)[0]


def derivative_bundle(f: Functional, tau, t, omega, mu=None, cfg: Optional[FdConfig] = None,
                      mode: str = "analytic") -> DerivativeBundle:
    """Full bundle at (tau, t) for one path; measure kernels at mu's particles."""
    grid, k, P, Mu = _args(t, omega, mu, False)
    j = grid.index(tau, strict=False)
    if j > k:
        raise DomainError(f"cut-off tau={tau} after t={t}")
    tk = grid.time(k)
    if mode == "analytic" and isinstance(f, FunctionalSpec):
        return f.bundle(grid, j, tk, P, Mu, Mu, order=2, want_dt=True)
    return fd_bundle(f, grid, j, tk, P, Mu, cfg or FdConfig(), with_measure=Mu is not None,
                     want_dt=k < grid.M)
