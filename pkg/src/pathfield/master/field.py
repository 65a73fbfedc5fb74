"""The decoupling field u(t, gamma, mu), its derivative fields and the
Monte Carlo checks built on it (Sobolev evaluator, flow, comparison)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..bsde.generator import CallableGenerator, SeparableGenerator
from ..bsde.solvers import BsdeProblem, BsdeSolution, FrozenLaws, solve_bsde_regression, solve_mf_bsde
from ..bsde.variation import BasePair, VariationKind, solve_variation_bsde
from ..forward import DiffusionCoeffs, Ensemble, simulate_forward, simulate_from_measure
from ..funcalc.dsl import FunctionalSpec, MeasureEval, PathEval
from ..pathspace import DiscretePath, DomainError, ParticleMeasure, bump_particle, bump_path

log = logging.getLogger(__name__)

PRESETS = ("general", "state-dependent", "ppde", "measure-only", "path-state-mixed")
# zero-variance estimators still carry rounding; comparisons use this floor
ABS_FLOOR = 1e-12
LAW_BATCHES = 20


def within(diff: float, stderr: float, n_se: float = 3.0, scale: float = 1.0) -> bool:
    return abs(diff) <= n_se * stderr + ABS_FLOOR * (1.0 + abs(scale))


def _leaves(fn):
    if fn is None:
        return []
    if isinstance(fn, FunctionalSpec):
        return list(fn.leaves)
    return None


@dataclass
class MasterProblem:
    """A BSDE problem read as a master equation; coefficients come from
    bsde.coeffs.  The preset restricts what Phi and f may read:

    state-dependent   current values only (PathEval / MeasureEval), nu allowed
    ppde              no measure argument, no nu
    measure-only      no path argument, no z, no nu
    path-state-mixed  measure read through current values only, no nu
    """
    bsde: BsdeProblem
    preset: str = "general"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.preset != "general":
            self._validate()

    @property
    def coeffs(self) -> DiffusionCoeffs:
        return self.bsde.coeffs

    @property
    def grid(self):
        return self.bsde.grid

    def _validate(self):
        gen = self.bsde.generator
        if isinstance(gen, CallableGenerator) or not isinstance(gen, SeparableGenerator):
            raise ValueError(f"preset {self.preset!r} needs a separable generator to be checked")
        src = gen.source
        leaves = [_leaves(self.bsde.terminal), _leaves(src)]
        if any(l is None for l in leaves):
            raise ValueError(f"preset {self.preset!r} needs DSL functionals to be checked")
        leaves = leaves[0] + leaves[1]
        uses_nu = gen.uses_nu
        uses_z = gen.b is not None and np.any(gen.b != 0)
        p = self.preset
        bad = None
        if p == "state-dependent":
            if any(not isinstance(l, (PathEval, MeasureEval)) for l in leaves):
                bad = "terminal and source may read only current values"
        elif p == "ppde":
            if any(l.uses_measure for l in leaves) or uses_nu:
                bad = "no measure or nu dependence allowed"
        elif p == "measure-only":
            if any(l.uses_path for l in leaves) or uses_z or uses_nu:
                bad = "no path, z or nu dependence allowed"
        elif p == "path-state-mixed":
            if any(l.uses_measure and not isinstance(l, MeasureEval) for l in leaves) or uses_nu:
                bad = "measure read through current values only, no nu"
        if bad:
            raise ValueError(f"preset {p!r}: {bad}")


@dataclass
class FieldEstimate:
    """u at one point with its Monte Carlo stderr.  derivatives maps a name
    (d_t, d_omega, d2_omega, d_omega_tau, d2_omega_tau, d_mu, d_omega_tilde_d_mu)
    to a (value, stderr) pair.  extras["samples"], when present, holds i.i.d.
    estimator samples whose mean is value; estimates from one seed share
    them row for row, which is what finite-difference stencils rely on."""
    value: float
    stderr: float
    N: int
    M: int
    derivatives: dict = field(default_factory=dict)
    residual: Optional[float] = None
    solution: Optional[BsdeSolution] = field(default=None, repr=False)
    diagonal: Optional[BsdeSolution] = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)


def _need_measure(bsde: BsdeProblem) -> bool:
    return bool(bsde.uses_measure or bsde.generator.uses_nu)


def _terminal_exact(bsde: BsdeProblem, gamma: DiscretePath, mu: Optional[ParticleMeasure]) -> float:
    grid = bsde.grid
    meas = None if mu is None else mu.values
    return float(np.asarray(bsde.terminal.value(grid, grid.T, gamma.values[None], meas)).reshape(-1)[0])


def _subset(ens: Ensemble, i) -> Ensemble:
    return Ensemble(ens.grid, ens.paths[i], ens.dB[i], ens.k0, ens.source[i], ens.rows[i], ens.stream)


def _law_batches(bsde, cond: BsdeSolution, diag: BsdeSolution, K: int) -> np.ndarray:
    """u re-solved on K paired groups: conditioned rows of group g against
    the frozen laws carried by diagonal rows of group g."""
    ci = np.array_split(np.arange(cond.N), K)
    di = np.array_split(np.arange(diag.N), K)
    laws = diag.laws
    out = np.empty(K)
    for g in range(K):
        nu = None if laws.nu is None else laws.nu[:, di[g]]
        sub = FrozenLaws(laws.measure[di[g]], nu)
        out[g] = solve_bsde_regression(bsde, frozen_laws=sub, ensemble=_subset(cond.ensemble, ci[g])).value
    return out


def decoupling_field(problem: MasterProblem, t: float, gamma: DiscretePath,
                     mu: Optional[ParticleMeasure] = None,
                     diagonal: Optional[BsdeSolution] = None, law_batches: int = LAW_BATCHES) -> FieldEstimate:
    """u(t, gamma, mu) = Y^{gamma_t, mu_t}(t).

    The law flow is fixed first by the mean-field solve on the diagonal
    (eta drawn from mu), then the conditioned equation is solved from
    gamma_t with those laws frozen.  A precomputed diagonal solution from the
    same (t, mu) may be passed in to skip the first step.

    When the laws enter, the particle sample behind them is a noise source
    the per-path spread cannot see; the stderr then comes from law_batches
    paired sub-solves (see _law_batches) and those group values are the
    estimate's samples.
    """
    bsde = problem.bsde
    grid = bsde.grid
    k = grid.index(t, strict=True)
    if gamma.grid != grid:
        raise DomainError("gamma lives on a different grid")
    if _need_measure(bsde) and mu is None:
        raise DomainError("problem reads the measure argument; pass mu")
    if k == grid.M:
        return FieldEstimate(_terminal_exact(bsde, gamma, mu), 0.0, bsde.N, grid.M)
    laws = None
    if _need_measure(bsde):
        if diagonal is None:
            diagonal = solve_mf_bsde(bsde, mu, grid.time(k))
        laws = diagonal.laws
    cond = solve_bsde_regression(bsde, gamma, grid.time(k), frozen_laws=laws)
    samples = cond.zeta_cv if cond.zeta_cv is not None else cond.zeta
    stderr = cond.stderr
    if diagonal is not None and law_batches >= 2:
        samples = _law_batches(bsde, cond, diagonal, min(law_batches, cond.N // 2, diagonal.N // 2))
        stderr = float(np.std(samples, ddof=1) / np.sqrt(samples.size))
    return FieldEstimate(cond.value, stderr, cond.N, grid.M, solution=cond, diagonal=diagonal,
                         extras={"samples": samples})


def _z_identity(problem: MasterProblem, sol: BsdeSolution, t: float):
    """d_omega u = sigma1^{-T} Z(t), stderr from E[Y_{k+1} dB_k]/dt."""
    grid = problem.grid
    k = sol.k0
    sig = problem.coeffs.diffusion(1, grid.time(k))
    Z = sol.Z[:, k].mean(axis=0)
    raw = sol.Y[:, k + 1, None] * sol.ensemble.dB[:, k] / grid.dt
    se = raw.std(axis=0, ddof=1) / np.sqrt(sol.N)
    val = np.linalg.solve(sig.T, Z)
    se = np.abs(np.linalg.inv(sig.T)) @ se
    return val, se


def derivative_fields(problem: MasterProblem, t: float, tau: float, gamma: DiscretePath,
                      mu: Optional[ParticleMeasure] = None, x_tilde=None, order: int = 1,
                      coord: int = 0, base: Optional[FieldEstimate] = None) -> FieldEstimate:
    """u with its derivative fields at (t, gamma, mu).

    d_omega comes from the Z component; path derivatives at the cut-off tau
    and, when x_tilde is given, the measure kernel at x_tilde from the
    variation equations.  order=2 adds the second-order kinds.
    """
    if order not in (1, 2):
        raise DomainError("order must be 1 or 2")
    grid = problem.grid
    if grid.index(tau, strict=False) > grid.index(t, strict=True):
        raise DomainError(f"cut-off tau={tau} after t={t}")
    base = base or decoupling_field(problem, t, gamma, mu)
    if base.solution is None:
        raise DomainError("derivative fields at t = T are those of the terminal functional")
    cond, diag = base.solution, base.diagonal
    bp = BasePair(cond, diag, mu, grid.time(cond.k0))
    out = FieldEstimate(base.value, base.stderr, base.N, base.M, solution=cond, diagonal=diag)
    v, se = _z_identity(problem, cond, t)
    out.derivatives["d_omega"] = (float(v[coord]), float(se[coord]))

    def run(tag, xt=None):
        s = solve_variation_bsde(VariationKind(tag, tau, coord, xt), bp, problem.bsde)
        return s.value, s.stderr

    out.derivatives["d_omega_tau"] = run("path-first")
    if order == 2:
        out.derivatives["d2_omega_tau"] = run("path-second")
    if x_tilde is not None:
        if diag is None:
            out.derivatives["d_mu"] = (0.0, 0.0)
            if order == 2:
                out.derivatives["d_omega_tilde_d_mu"] = (0.0, 0.0)
        else:
            out.derivatives["d_mu"] = run("measure-kernel", x_tilde)
            if order == 2:
                out.derivatives["d_omega_tilde_d_mu"] = run("measure-kernel-second", x_tilde)
    return out


# --- bump-and-resolve finite differences (common random numbers) ----------------

def combine(terms):
    """sum c_i u_i over (c_i, FieldEstimate) pairs with its stderr.

    Estimates from one seed share their samples row for row, so the stderr
    comes from the combined samples; exact estimates (zero stderr, no
    samples) drop out, and mismatched samples fall back to sum |c_i| se_i.
    """
    val = float(sum(c * e.value for c, e in terms))
    live = [(c, e.extras.get("samples")) for c, e in terms
            if not (e.stderr == 0.0 and e.extras.get("samples") is None)]
    if not live:
        return val, 0.0
    if all(s is not None for _, s in live) and len({s.shape for _, s in live}) == 1:
        comb = sum(c * s for c, s in live)
        return val, float(np.std(comb, ddof=1) / np.sqrt(comb.size))
    return val, float(sum(abs(c) * e.stderr for c, e in terms))


def _paired(a: FieldEstimate, b: FieldEstimate):
    return combine([(1.0, b), (-1.0, a)])


def fd_path_derivative(problem: MasterProblem, t, tau, gamma, mu=None, h: float = 1e-2,
                       coord: int = 0, order: int = 1):
    """Central difference of u under the bump gamma + h e_coord 1_[tau, T]."""
    e = np.zeros(gamma.d)
    e[coord] = h
    up = decoupling_field(problem, t, bump_path(gamma, tau, e, strict=False), mu)
    dn = decoupling_field(problem, t, bump_path(gamma, tau, -e, strict=False), mu)
    d, se = _paired(dn, up)
    if order == 1:
        return d / (2 * h), se / (2 * h)
    mid = decoupling_field(problem, t, gamma, mu)
    s1, se1 = _paired(mid, up)
    s2, se2 = _paired(mid, dn)
    return (s1 + s2) / h ** 2, float(np.hypot(se1, se2)) / h ** 2


def fd_measure_derivative(problem: MasterProblem, t, tau, gamma, mu: ParticleMeasure, particle: int,
                          h: float = 1e-2, coord: int = 0):
    """Particle-lift estimate P (u(mu + h) - u(mu - h)) / 2h of d_mu u at
    particle `particle`, the particle bumped on [tau, T]."""
    e = np.zeros(mu.d)
    e[coord] = h
    up = decoupling_field(problem, t, gamma, bump_particle(mu, particle, tau, e, strict=False))
    dn = decoupling_field(problem, t, gamma, bump_particle(mu, particle, tau, -e, strict=False))
    d, se = _paired(dn, up)
    return mu.N * d / (2 * h), mu.N * se / (2 * h)


# --- Sobolev solution -------------------------------------------------------------

def sobolev_eval(Phi, f, t: float, omega: DiscretePath, mu: Optional[ParticleMeasure] = None,
                 N: int = 10_000, seed: int = 0, coeffs: Optional[DiffusionCoeffs] = None,
                 batches: int = 20) -> FieldEstimate:
    """Plain Monte Carlo of E[Phi(X_T, L(X'_T)) + int_t^T f(r, X_r, L(X'_r)) dr]
    with X from omega_t, X' from eta_t ~ mu, left-point time quadrature.

    The stderr comes from `batches` independent batches, each pairing its
    share of X with its share of X' as the measure argument, so noise in
    the law enters the error bar.
    """
    grid = omega.grid
    coeffs = coeffs or DiffusionCoeffs.standard(omega.d)
    k0 = grid.index(t, strict=True)
    fns = [g for g in (Phi, f) if g is not None]
    uses_measure = any(g.uses_measure for g in fns)
    if uses_measure and mu is None:
        raise DomainError("functional reads the measure argument; pass mu")
    X = simulate_forward(coeffs, omega, grid.time(k0), N, seed, stream="x").paths
    Xp = None
    if uses_measure:
        Xp = simulate_from_measure(coeffs, mu, grid.time(k0), N, seed, stream="eta").paths

    def zeta(P, Q):
        out = np.zeros(P.shape[0])
        if Phi is not None:
            out = out + Phi.value(grid, grid.T, P, Q)
        if f is not None:
            acc = np.zeros(P.shape[0])
            for k in range(k0, grid.M):
                acc = acc + f.value(grid, grid.time(k), P, Q)
            out = out + grid.dt * acc
        return out

    z = zeta(X, Xp)
    value = float(np.mean(z))
    K = max(2, min(int(batches), N // 2))
    idx = np.array_split(np.arange(N), K)
    bvals = np.array([np.mean(zeta(X[i], None if Xp is None else Xp[i])) for i in idx])
    stderr = float(np.std(bvals, ddof=1) / np.sqrt(K))
    return FieldEstimate(value, stderr, N, grid.M, extras={"batch_values": bvals, "samples": bvals})


# --- flow property and comparison -------------------------------------------------

@dataclass
class FlowReport:
    t: float
    s: float
    refit: np.ndarray          # u(s, X^i, L(B^eta_s)) re-evaluated
    stored: np.ndarray         # Y^{gamma_t, mu_t}(s) on the same paths
    stderr_i: np.ndarray
    mean_discrepancy: float
    stderr: float

    @property
    def max_abs_discrepancy(self) -> float:
        return float(np.max(np.abs(self.refit - self.stored)))

    @property
    def ok(self) -> bool:
        return within(self.mean_discrepancy, self.stderr, scale=float(np.max(np.abs(self.stored))))


def check_flow(problem: MasterProblem, t: float, s: float, gamma: DiscretePath,
               mu: Optional[ParticleMeasure] = None, n_paths: int = 10,
               base: Optional[FieldEstimate] = None) -> FlowReport:
    """Re-evaluate u at time s along n_paths simulated states X^i (with the
    law of B^{eta_t} stopped at s) and compare with the stored backward
    solution Y(s) on the same paths.  Both use the run seed."""
    bsde = problem.bsde
    grid = bsde.grid
    if s < t:
        raise DomainError(f"flow check needs t <= s, got t={t}, s={s}")
    base = base or decoupling_field(problem, t, gamma, mu)
    ks = grid.index(s, strict=True)
    n = min(n_paths, bsde.N)
    if base.solution is None:                    # t = T
        v = np.full(1, base.value)
        return FlowReport(t, s, v, v.copy(), np.zeros(1), 0.0, 0.0)
    cond, diag = base.solution, base.diagonal
    paths = cond.ensemble.paths
    mu_s = None if diag is None else ParticleMeasure(grid, diag.ensemble.paths, diag.ensemble.rows)
    if ks == grid.M:
        # both sides are Phi, evaluated row by row against the same frozen laws
        meas = None if cond.laws is None else cond.laws.measure
        stored = cond.Y[:n, grid.M]
        refit = np.array([float(np.asarray(bsde.terminal.value(grid, grid.T, paths[i:i + 1], meas))[0])
                          for i in range(n)])
        return FlowReport(t, s, refit, stored, np.zeros(n), float(np.mean(refit - stored)), 0.0)
    diag_s = None
    if diag is not None:
        diag_s = solve_mf_bsde(bsde, mu_s, grid.time(ks)) if _need_measure(bsde) else None
    refit = np.empty(n)
    se_u = np.empty(n)
    for i in range(n):
        u = decoupling_field(problem, grid.time(ks), DiscretePath(grid, paths[i]), mu_s, diagonal=diag_s)
        refit[i], se_u[i] = u.value, u.stderr
    stored = cond.Y[:n, ks]
    # regression error of the stored value: leverage times the conditional
    # variance of the pathwise target from s on
    dt = grid.dt
    F = cond.F
    target = cond.Y[:, grid.M] + 0.5 * dt * (F[:, ks:grid.M] + F[:, ks + 1:grid.M + 1]).sum(axis=1)
    resid = target - cond.Y[:, ks]
    h = cond.projectors[ks].leverage()[:n]
    se_i = np.sqrt(se_u ** 2 + np.var(resid, ddof=1) * h)
    # rows share noise through the common seed: average the stderrs rather
    # than adding them in quadrature
    return FlowReport(t, s, refit, stored, se_i, float(np.mean(refit - stored)), float(np.mean(se_i)))


@dataclass
class CompareReport:
    u1: float
    u2: float
    margin: float
    stderr: float

    @property
    def ordered(self) -> bool:
        return self.margin >= -(3.0 * self.stderr + ABS_FLOOR * (1.0 + abs(self.u2)))


def compare_fields(p1: MasterProblem, p2: MasterProblem, t: float, gamma: DiscretePath,
                   mu: Optional[ParticleMeasure] = None) -> CompareReport:
    """u1, u2 and the margin u2 - u1 under common random numbers.  The
    caller certifies f1 <= f2 and Phi1 <= Phi2."""
    b1, b2 = p1.bsde, p2.bsde
    if (b1.seed, b1.N, b1.grid) != (b2.seed, b2.N, b2.grid):
        raise ValueError("compared problems must share seed, particle count and grid")
    e1 = decoupling_field(p1, t, gamma, mu)
    e2 = decoupling_field(p2, t, gamma, mu)
    m, se = _paired(e1, e2)
    return CompareReport(e1.value, e2.value, m, se)
