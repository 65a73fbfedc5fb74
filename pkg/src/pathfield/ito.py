"""Residual tests of the functional Ito formula and its partial (cut-off) form.

Along a simulated grid trajectory the increment of f is split, per step
[t_k, t_{k+1}], into

    horizontal   f(t_{k+1}, X_{t_k}, L_k)     - f(t_k, X_{t_k}, L_k)
    vertical     f(t_{k+1}, X_{t_{k+1}}, L_k) - f(t_{k+1}, X_{t_k}, L_k)
    measure      f(t_{k+1}, X_{t_{k+1}}, L_{k+1}) - f(t_{k+1}, X_{t_{k+1}}, L_k)

and each piece is compared with its term of the formula: the time integral
of d_t f on the stopped path (two-point Gauss rule inside the cell), the
left-point stochastic integral d_omega f . dX with the trace term
1/2 Tr[d2_omega f sigma1 sigma1^T] dt, and the tilde-ensemble average of
d_mu f . dX~' with 1/2 Tr[d_x~ d_mu f sigma2 sigma2^T] dt.  The residual is
the Taylor remainder plus the replacement of (dX)^2 by its predictable
quadratic variation.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .forward import DiffusionCoeffs, simulate_forward, simulate_from_measure
from .funcalc.dsl import Functional, FunctionalSpec, track
from .funcalc.fd import FdConfig, batch_bundle, fd_dt
from .parallel import pmap
from .pathspace import DiscretePath, DomainError, ParticleMeasure

TERMS = ("time", "d_omega", "trace_omega", "d_mu", "trace_mu")
CHUNK = 2048
_GAUSS = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


@dataclass
class ItoReport:
    residual_mean: float
    residual_stderr: float
    terms: dict
    N: int
    M: int
    lhs_mean: float
    wall_time: float = 0.0
    streams: tuple = ()
    samples: dict = field(default_factory=dict, repr=False)

    def passes(self, k: float = 3.0) -> bool:
        return abs(self.residual_mean) <= k * self.residual_stderr + 1e-12 * (1 + abs(self.lhs_mean))

    def row(self) -> dict:
        out = {"M": self.M, "N": self.N}
        out.update({f"{k}_mean": v for k, v in self.terms.items()})
        out.update(residual_mean=self.residual_mean, residual_stderr=self.residual_stderr,
                   wall_time=self.wall_time)
        return out


def _stop_next(S, X, k):
    """Advance stopped paths from node k to node k+1 in place."""
    S[:, k + 1:] = X[:, k + 1:k + 2]


def _time_term(f, grid, k, S, Mu, cfg):
    t0, dt = grid.time(k), grid.dt
    if isinstance(f, FunctionalSpec):
        return sum(0.5 * dt * f.time_derivative(grid, t0 + g * dt, S, Mu) for g in _GAUSS)
    return fd_dt(f, grid, t0, S, Mu, cfg) * dt


def _decompose_chunk(f, grid, coeffs, X, dX, Xp, dXp, k_start, k_end, v, cfg):
    """Per-sample LHS and term sums for a chunk of X paths."""
    B = X.shape[0]
    # nodes <= k of the stopped arrays agree with X, X'; integrands are cached
    S = track(np.array(X, copy=True), X, k_start, stopped=True)
    S[:, k_start + 1:] = X[:, k_start:k_start + 1]
    Mu = track(np.array(Xp, copy=True), Xp, k_start, stopped=True)
    Mu[:, k_start + 1:] = Xp[:, k_start:k_start + 1]
    partial = v is not None
    t_eval = (lambda k: v) if partial else grid.time
    f_start = f.value(grid, t_eval(k_start), S, Mu if f.uses_measure else None)
    acc = {name: np.zeros(B) for name in TERMS}
    meas = Mu if f.uses_measure else None
    for k in range(k_start, k_end):
        tk1 = t_eval(k + 1)
        a1 = coeffs.diffusion(1, grid.time(k))
        a2 = coeffs.diffusion(2, grid.time(k))
        if not partial:
            acc["time"] += _time_term(f, grid, k, S, meas, cfg)
        bp = batch_bundle(f, grid, k + 1, tk1, S, meas, None, order=2, cfg=cfg, want_dt=False)
        acc["d_omega"] += np.einsum("bd,bd->b", bp.d_omega, dX[:, k])
        acc["trace_omega"] += 0.5 * grid.dt * np.einsum("bde,ed->b", bp.d2_omega, a1 @ a1.T)
        _stop_next(S, X, k)
        S.valid = k + 1
        if f.uses_measure:
            bm = batch_bundle(f, grid, k + 1, tk1, S, Mu, Mu, order=2, cfg=cfg, want_dt=False)
            acc["d_mu"] += bm.mu_dot(dXp[:, k])
            acc["trace_mu"] += 0.5 * grid.dt * bm.mu2_trace(a2 @ a2.T)
            _stop_next(Mu, Xp, k)
        Mu.valid = k + 1
    f_end = f.value(grid, t_eval(k_end), S, meas)
    return np.asarray(f_end - f_start), {k: np.asarray(v) for k, v in acc.items()}


def _run(f: Functional, coeffs: DiffusionCoeffs, t, s, gamma: DiscretePath, eta: ParticleMeasure,
         N: int, seed: int, v=None, N_prime: Optional[int] = None, cfg: Optional[FdConfig] = None):
    if N < 2:
        raise DomainError("need at least two samples for a standard error")
    grid = gamma.grid
    kt, ks = grid.index(t), grid.index(s)
    if kt > ks:
        raise DomainError(f"need t <= s, got t={t}, s={s}")
    if v is not None and grid.time(ks) > v + 1e-12:
        raise DomainError(f"need s <= v, got s={s}, v={v}")
    cfg = cfg or FdConfig()
    start = _time.perf_counter()
    X = simulate_forward(coeffs, gamma, grid.time(kt), N, seed, stream="ito-x", which=1)
    Xp = simulate_from_measure(coeffs, eta, grid.time(kt), N_prime or N, seed, stream="ito-xprime", which=2)
    dX = np.diff(X.paths, axis=1)
    dXp = np.diff(Xp.paths, axis=1)
    chunks = [slice(i, min(i + CHUNK, N)) for i in range(0, N, CHUNK)]
    out = pmap(lambda sl: _decompose_chunk(f, grid, coeffs, X.paths[sl], dX[sl], Xp.paths, dXp,
                                           kt, ks, v, cfg), chunks)
    lhs = np.concatenate([o[0] for o in out])
    terms = {name: np.concatenate([o[1][name] for o in out]) for name in TERMS}
    bad = np.nonzero(~np.isfinite(lhs))[0]
    if bad.size:
        raise FloatingPointError(f"non-finite functional value at sample {int(bad[0])}")
    resid = lhs - sum(terms[name] for name in TERMS)
    return ItoReport(
        residual_mean=float(resid.mean()),
        residual_stderr=float(resid.std(ddof=1) / np.sqrt(N)),
        terms={name: float(terms[name].mean()) for name in TERMS},
        N=N, M=grid.M, lhs_mean=float(lhs.mean()),
        wall_time=_time.perf_counter() - start,
        streams=(X.stream, Xp.stream),
        samples={"lhs": lhs, "residual": resid, **terms},
    )


def ito_decomposition(f: Functional, coeffs: DiffusionCoeffs, t: float, s: float, gamma: DiscretePath,
                      eta: ParticleMeasure, N: int, seed: int, N_prime: Optional[int] = None,
                      cfg: Optional[FdConfig] = None) -> ItoReport:
    """Residual of f(s, X, L_X') - f(t, gamma, L_eta) against the Ito-Dupire terms."""
    return _run(f, coeffs, t, s, gamma, eta, N, seed, None, N_prime, cfg)


def partial_ito_decomposition(f: Functional, coeffs: DiffusionCoeffs, v: float, t: float, s: float,
                              gamma: DiscretePath, eta: ParticleMeasure, N: int, seed: int,
                              N_prime: Optional[int] = None, cfg: Optional[FdConfig] = None) -> ItoReport:
    """Residual of f(v, X_s, L_{X'_s}) - f(v, gamma_t, L_{eta_t}) with cut-offs at the running time."""
    return _run(f, coeffs, t, s, gamma, eta, N, seed, float(v), N_prime, cfg)
