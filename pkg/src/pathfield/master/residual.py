"""Master-equation residual of a u-provider and the mollification sweep.

The residual is

    d_t u + 1/2 Tr[d2_omega u s1 s1^T] + d_omega u . b1
          + 1/2 Tr E^mu[d_w~ d_mu u(W) s2 s2^T] + E^mu[d_mu u(W)] . b2
          + f(t, gamma, u, s1^T d_omega u, mu, L(u(t, W^mu, mu))),

each term assembled from finite differences of the provider with every
evaluation on the same seed, or read off an analytic provider directly.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..bsde.generator import Slot
from ..funcalc.fd import FdConfig
from ..pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid, stop_array
from .closed_forms import CaseParams, ClosedForm, KinkError, closed_form_library, limit_value
from .field import ABS_FLOOR, FieldEstimate, MasterProblem, combine, decoupling_field, sobolev_eval

log = logging.getLogger(__name__)

RADEMACHER_DRAWS = 4


class DecouplingProvider:
    """u from the regression solver of a master problem."""

    def __init__(self, problem: MasterProblem):
        self.problem = problem

    def __call__(self, t, gamma, mu=None) -> FieldEstimate:
        return decoupling_field(self.problem, t, gamma, mu)

    def nu(self, t, gamma, mu, est: FieldEstimate) -> np.ndarray:
        # u along the mu-particles is the diagonal solution at its start node
        if est.diagonal is not None:
            return est.diagonal.Y[:, est.diagonal.k0]
        return _nu_by_particles(self, t, mu)


class SobolevProvider:
    """u by plain Monte Carlo of the representation formula (f free of y, z, nu)."""

    def __init__(self, Phi, f=None, N: int = 10_000, seed: int = 0, coeffs=None, batches: int = 20):
        self.Phi, self.f, self.N, self.seed, self.coeffs, self.batches = Phi, f, N, seed, coeffs, batches
        self.uses_measure = any(g is not None and g.uses_measure for g in (Phi, f))

    def __call__(self, t, gamma, mu=None) -> FieldEstimate:
        return sobolev_eval(self.Phi, self.f, t, gamma, mu, self.N, self.seed, self.coeffs, self.batches)


def _nu_by_particles(provider, t, mu):
    return np.array([provider(t, p, mu).value for p in mu.particles])


def _rademacher(seed: int, t: float, n: int, draws: int) -> np.ndarray:
    key = zlib.crc32(f"rademacher:{t!r}".encode())
    rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
    return rng.choice([-1.0, 1.0], size=(draws, n))


@dataclass
class ResidualReport:
    case: str
    t: float
    residual: float
    stderr: float
    fd_error: float
    terms: dict = field(default_factory=dict)
    mode: str = "fd"

    @property
    def budget(self) -> float:
        return 3.0 * self.stderr + self.fd_error + ABS_FLOOR * (1.0 + sum(abs(v) for v in self.terms.values()))

    @property
    def ok(self) -> bool:
        return abs(self.residual) <= self.budget


def _shift(omega: DiscretePath, k: int, x) -> DiscretePath:
    v = np.array(omega.values, copy=True)
    v[k:] += x
    return DiscretePath(omega.grid, v)


def _shift_measure(mu: ParticleMeasure, k: int, X) -> ParticleMeasure:
    """Add X (d,) or per-particle (P, d) on [t_k, T] to every particle."""
    v = np.array(mu.values, copy=True)
    X = np.asarray(X, dtype=float)
    v[:, k:] += X[:, None, :] if X.ndim == 2 else X
    return ParticleMeasure(mu.grid, v, mu.ids)


def _fd_terms(problem: MasterProblem, provider, t, gamma, mu, cfg: FdConfig, scale: float, seed: int):
    """Finite-difference derivative terms at step multiplier `scale`.

    Returns (u estimate, {term: (value, stderr)}, Z)."""
    grid = problem.grid
    co = problem.coeffs
    k = grid.index(t, strict=True)
    d = gamma.d
    s1, s2 = co.diffusion(1, t), co.diffusion(2, t)
    b1, b2 = co.drift(1, t), co.drift(2, t)
    g_t = DiscretePath(grid, stop_array(gamma.values[None], k)[0])
    m_t = None if mu is None else ParticleMeasure(grid, stop_array(mu.values, k), mu.ids)
    u0 = provider(t, g_t, m_t)
    out = {}
    # horizontal: one grid step with stopped arguments
    u1 = provider(grid.time(k + 1), g_t, m_t)
    out["d_t"] = combine([(1 / grid.dt, u1), (-1 / grid.dt, u0)])
    x_t = g_t.values[k][None]
    h1 = float(cfg.steps_path(x_t, 1)[0]) * scale
    h2 = float(cfg.steps_path(x_t, 2)[0]) * scale
    Z = np.zeros(d)
    Zse = np.zeros(d)
    tr, tr_se = 0.0, 0.0
    for a in range(d):
        e = s1 @ np.eye(d)[a]
        up, dn = provider(t, _shift(g_t, k, h1 * e), m_t), provider(t, _shift(g_t, k, -h1 * e), m_t)
        Z[a], Zse[a] = combine([(0.5 / h1, up), (-0.5 / h1, dn)])
        up2, dn2 = provider(t, _shift(g_t, k, h2 * e), m_t), provider(t, _shift(g_t, k, -h2 * e), m_t)
        v, se = combine([(1 / h2 ** 2, up2), (1 / h2 ** 2, dn2), (-2 / h2 ** 2, u0)])
        tr, tr_se = tr + v, tr_se + se
    out["z"] = (Z, Zse)
    # floating-point cancellation in the stencils
    inv = 2 / grid.dt + d * (2 / h1 + 4 / h2 ** 2)
    out["path_second"] = (tr, tr_se)
    if np.any(b1 != 0):
        up, dn = provider(t, _shift(g_t, k, h1 * b1), m_t), provider(t, _shift(g_t, k, -h1 * b1), m_t)
        out["path_drift"] = combine([(0.5 / h1, up), (-0.5 / h1, dn)])
    else:
        out["path_drift"] = (0.0, 0.0)
    uses_mu = m_t is not None and getattr(provider, "uses_measure", True)
    if uses_mu and np.any(b2 != 0):
        e1 = cfg.step_lift(m_t.values, 1) * scale
        up, dn = provider(t, g_t, _shift_measure(m_t, k, e1 * b2)), provider(t, g_t, _shift_measure(m_t, k, -e1 * b2))
        out["measure_drift"] = combine([(0.5 / e1, up), (-0.5 / e1, dn)])
    else:
        out["measure_drift"] = (0.0, 0.0)
    if uses_mu:
        e2 = cfg.step_lift(m_t.values, 2) * scale
        inv += 2 / cfg.step_lift(m_t.values, 1) + 4 * d / e2 ** 2
        signs = _rademacher(seed, t, m_t.N, RADEMACHER_DRAWS)
        vals, ses = [], []
        for sg in signs:
            v, se = 0.0, 0.0
            for a in range(d):
                X = sg[:, None] * (e2 * (s2 @ np.eye(d)[a]))[None]
                up, dn = provider(t, g_t, _shift_measure(m_t, k, X)), provider(t, g_t, _shift_measure(m_t, k, -X))
                va, sa = combine([(1 / e2 ** 2, up), (1 / e2 ** 2, dn), (-2 / e2 ** 2, u0)])
                v, se = v + va, se + sa
            vals.append(v)
            ses.append(se)
        # spread over the sign draws carries the off-diagonal O(1/N) noise
        spread = np.std(vals, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
        out["measure_second"] = (float(np.mean(vals)), float(np.hypot(np.mean(ses), spread)))
    else:
        out["measure_second"] = (0.0, 0.0)
    out["round"] = 4 * np.finfo(float).eps * (1.0 + abs(u0.value)) * inv
    return u0, out, Z


def _generator_term(problem: MasterProblem, provider, t, gamma, mu, u: FieldEstimate, Z):
    gen = problem.bsde.generator
    grid = problem.grid
    k = grid.index(t, strict=True)
    P = stop_array(gamma.values[None], k)
    Q = None if mu is None else stop_array(mu.values, k)
    nu = None
    if gen.uses_nu:
        nu = provider.nu(t, gamma, mu, u) if hasattr(provider, "nu") else _nu_by_particles(provider, t, mu)
    z = (problem.coeffs.diffusion(1, t).T @ Z)[None]
    return float(gen.value(Slot(grid, k, P, Q, nu), np.array([u.value]), z)[0])


def pde_residual(problem: MasterProblem, provider: Callable, t: float, gamma: DiscretePath,
                 mu: Optional[ParticleMeasure] = None, cfg: Optional[FdConfig] = None,
                 mode: str = "fd", case: str = "", seed: int = 0) -> ResidualReport:
    """Signed residual of the master equation for `provider` at (t, gamma, mu).

    mode="analytic" reads the derivative fields from provider.analytic (closed
    forms); mode="fd" differentiates the provider, repeating the stencils
    at half the steps so the budget holds 3 MC stderrs plus |r_h - r_{h/2}|.
    Probes within two grid steps of a kink of the provider raise KinkError.
    """
    grid = problem.grid
    k = grid.index(t, strict=True)
    if k >= grid.M:
        raise DomainError("the residual needs t < T (forward time difference)")
    if isinstance(provider, ClosedForm) and provider.near_kink(grid, t):
        raise KinkError(f"t={t} lies within the guard band of a kink {provider.kinks}")
    co = problem.coeffs
    s1, s2, b1, b2 = co.diffusion(1, t), co.diffusion(2, t), co.drift(1, t), co.drift(2, t)
    case = case or getattr(provider, "case", "")
    if mode == "analytic":
        if not hasattr(provider, "analytic"):
            raise ValueError("analytic mode needs a provider with analytic derivatives")
        der = provider.analytic(t, gamma, mu)
        u = provider(t, gamma, mu)
        terms = {
            "d_t": der["d_t"],
            "path_second": 0.5 * float(np.trace(der["d2_omega"] @ s1 @ s1.T)),
            "path_drift": float(der["d_omega"] @ b1),
            "measure_second": 0.5 * float(np.trace(der["d_omega_tilde_d_mu"] @ s2 @ s2.T)),
            "measure_drift": float(der["d_mu"] @ b2),
            "generator": _generator_term(problem, provider, t, gamma, mu, u, der["d_omega"]),
        }
        return ResidualReport(case, t, float(sum(terms.values())), 0.0, 0.0, terms, mode)
    if mode != "fd":
        raise ValueError("mode must be 'fd' or 'analytic'")
    cfg = cfg or FdConfig()
    runs = []
    for scale in (1.0, 0.5):
        u0, out, Z = _fd_terms(problem, provider, t, gamma, mu, cfg, scale, seed)
        # Z holds s1-directional derivatives; the Z identity needs d_omega u
        d_omega = np.linalg.solve(s1.T, Z)
        terms = {
            "d_t": out["d_t"][0],
            "path_second": 0.5 * out["path_second"][0],
            "path_drift": out["path_drift"][0],
            "measure_second": 0.5 * out["measure_second"][0],
            "measure_drift": out["measure_drift"][0],
            "generator": _generator_term(problem, provider, t, gamma, mu, u0, d_omega),
        }
        se = (out["d_t"][1] + 0.5 * out["path_second"][1] + out["path_drift"][1]
              + 0.5 * out["measure_second"][1] + out["measure_drift"][1])
        runs.append((float(sum(terms.values())), se, terms, out["round"]))
    r, se, terms, rnd = runs[0]
    return ResidualReport(case, t, r, se, abs(r - runs[1][0]) + rnd + runs[1][3], terms, mode)


# --- mollification sweep ----------------------------------------------------------

SWEEP_COLUMNS = ("case", "t", "epsilon", "M", "N", "estimate", "stderr", "analytic", "abs_err", "budget")


def mollify_sweep(case: str, eps_values: Sequence[float], t_values: Sequence[float], grid: TimeGrid,
                  omega: DiscretePath, mu: Optional[ParticleMeasure] = None, N: int = 10_000, seed: int = 0,
                  params: Optional[CaseParams] = None) -> list[dict]:
    """One row per (t, eps): the Sobolev estimate of u_eps, its closed form
    ("analytic"), and abs_err = |estimate - limit| against the eps -> 0 field."""
    params = params or CaseParams(T=grid.T)
    rows = []
    for t in t_values:
        lim = limit_value(case, t, omega, mu, params)
        for eps in eps_values:
            cf = closed_form_library(case, CaseParams(**{**params.__dict__, "eps": eps}))
            est = sobolev_eval(cf.terminal, cf.source, t, omega, mu, N, seed)
            rows.append(dict(case=case, t=float(t), epsilon=float(eps), M=grid.M, N=N, estimate=est.value,
                             stderr=est.stderr, analytic=cf.value(t, omega, mu),
                             abs_err=abs(est.value - lim), budget=3.0 * est.stderr + ABS_FLOOR))
    return rows


def sweep_monotone(rows: list[dict]) -> bool:
    """abs_err non-increasing in decreasing eps at every t, within MC noise."""
    ok = True
    for t in sorted({r["t"] for r in rows}):
        rs = sorted((r for r in rows if r["t"] == t), key=lambda r: -r["epsilon"])
        for a, b in zip(rs, rs[1:]):
            tol = 3.0 * float(np.hypot(a["stderr"], b["stderr"])) + 1e-9
            ok &= b["abs_err"] <= a["abs_err"] + tol
    return bool(ok)
