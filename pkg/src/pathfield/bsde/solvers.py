"""Regression BSDE, linear mean-field BSDE and the law fixed point."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import ConvergenceError
from ..forward import DiffusionCoeffs, Ensemble, gaussian_table, simulate_forward, simulate_from_measure
from ..funcalc.dsl import Functional, track
from ..pathspace import DiscretePath, DomainError, ParticleMeasure, ShapeError, TimeGrid, w1d
from .generator import Generator, SeparableGenerator, Slot
from .regression import FeatureMap, ProjectorSet, SweepResult, linear_sweep, theta_sweep

log = logging.getLogger(__name__)


@dataclass
class BsdeProblem:
    """Terminal functional Phi(omega, mu), generator f and forward coefficients."""
    terminal: Functional
    grid: TimeGrid
    generator: Generator = field(default_factory=SeparableGenerator)
    coeffs: DiffusionCoeffs = field(default_factory=DiffusionCoeffs.standard)
    N: int = 10_000
    seed: int = 0
    features: Sequence[Functional] = ()
    degree: int = 2
    law_tol: float = 1e-4
    max_iter: int = 50
    fixed_iterations: Optional[int] = None

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("need at least two particles")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1")

    @property
    def uses_measure(self):
        return bool(self.terminal.uses_measure or self.generator.uses_measure)

    def feature_specs(self):
        src = getattr(self.generator, "source", None)
        return [self.terminal, src, *self.features]


@dataclass
class FrozenLaws:
    """Law flows held fixed during a conditioned solve: the path-measure flow
    (particle paths read at each node) and nu_k as samples (M+1, N_nu)."""
    measure: Optional[np.ndarray] = None
    nu: Optional[np.ndarray] = None


@dataclass
class BsdeSolution:
    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    k0: int
    zeta: np.ndarray
    zeta_cv: Optional[np.ndarray] = None
    F: Optional[np.ndarray] = None
    ensemble: Optional[Ensemble] = None
    laws: Optional[FrozenLaws] = None
    projectors: Optional[ProjectorSet] = None
    gaps: list = field(default_factory=list)
    iterations: int = 1
    mart_mean: Optional[np.ndarray] = None
    mart_stderr: Optional[np.ndarray] = None
    extra_var: float = 0.0        # variance from sources outside the path sample

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def y0(self) -> float:
        """Sample mean of the regressed Y at the start node."""
        return float(np.mean(self.Y[:, self.k0]))

    @property
    def value(self) -> float:
        """Control-variate estimate of Y at the start node."""
        z = self.zeta if self.zeta_cv is None else self.zeta_cv
        return float(np.mean(z))

    @property
    def stderr(self) -> float:
        z = self.zeta if self.zeta_cv is None else self.zeta_cv
        return float(np.sqrt(np.var(z, ddof=1) / self.N + self.extra_var))

    @property
    def nu(self) -> np.ndarray:
        """Empirical laws of Y as samples (M+1, N); nodes before k0 repeat k0."""
        out = np.array(self.Y.T, copy=True)
        out[:self.k0] = out[self.k0]
        return out

    def y_mean(self) -> np.ndarray:
        """Node means of Y; NaN before the start node."""
        out = np.full(self.Y.shape[1], np.nan)
        out[self.k0:] = self.Y[:, self.k0:].mean(axis=0)
        return out

    def y_stderr(self) -> np.ndarray:
        out = np.full(self.Y.shape[1], np.nan)
        out[self.k0:] = self.Y[:, self.k0:].std(axis=0, ddof=1) / np.sqrt(self.N)
        return out

    def z_abs_mean(self) -> np.ndarray:
        return np.mean(np.linalg.norm(self.Z, axis=-1), axis=0)


def _sweep_solution(grid, k0, res: SweepResult, **kw) -> BsdeSolution:
    return BsdeSolution(grid=grid, Y=res.Y, Z=res.Z, k0=k0, zeta=res.zeta, zeta_cv=res.zeta_cv, F=res.F,
                        mart_mean=res.mart_mean, mart_stderr=res.mart_stderr, **kw)


def _check_laws(problem: BsdeProblem, laws: Optional[FrozenLaws]):
    M = problem.grid.M
    laws = laws or FrozenLaws()
    if problem.uses_measure and laws.measure is None:
        raise ValueError("problem reads the measure argument; pass frozen_laws.measure")
    if problem.generator.uses_nu and laws.nu is None:
        raise ValueError("generator reads nu; pass frozen_laws.nu")
    if laws.measure is not None and np.shape(laws.measure)[1] != M + 1:
        raise ShapeError("frozen measure flow must cover every grid node")
    if laws.nu is not None and np.shape(laws.nu)[0] != M + 1:
        raise ShapeError("frozen nu flow must cover every grid node")
    return laws


def conditioned_setup(problem: BsdeProblem, ens: Ensemble, laws: FrozenLaws,
                      projectors: Optional[ProjectorSet] = None):
    grid = problem.grid
    paths = track(ens.paths)
    measure = None if laws.measure is None else track(np.asarray(laws.measure))
    if projectors is None:
        projectors = ProjectorSet(FeatureMap(grid, paths, problem.feature_specs(), problem.degree))
    return paths, measure, projectors


def solve_bsde_regression(problem: BsdeProblem, gamma: Optional[DiscretePath] = None, t: float = 0.0,
                          frozen_laws: Optional[FrozenLaws] = None, ensemble: Optional[Ensemble] = None,
                          projectors: Optional[ProjectorSet] = None) -> BsdeSolution:
    """Backward regression solve along X^{gamma_t} (or a given ensemble) with
    the law arguments frozen."""
    grid = problem.grid
    laws = _check_laws(problem, frozen_laws)
    if ensemble is None:
        if gamma is None:
            gamma = DiscretePath.constant(grid, np.zeros(problem.coeffs.d))
        ensemble = simulate_forward(problem.coeffs, gamma, t, problem.N, problem.seed, stream="x")
    paths, measure, projectors = conditioned_setup(problem, ensemble, laws, projectors)
    nu = laws.nu
    gen_obj = problem.generator

    def gen(k, y, z):
        return gen_obj.value(Slot(grid, k, paths, measure, None if nu is None else nu[k]), y, z)

    terminal = np.asarray(problem.terminal.value(grid, grid.T, paths, measure), dtype=float)
    res = theta_sweep(grid, ensemble.k0, terminal, ensemble.dB, projectors, gen)
    if projectors.ridge_steps:
        log.info("ridge fallback used at steps %s", sorted(set(projectors.ridge_steps)))
    return _sweep_solution(grid, ensemble.k0, res, ensemble=ensemble, laws=laws, projectors=projectors)


def solve_mf_bsde(problem: BsdeProblem, eta: ParticleMeasure, t: float = 0.0,
                  ensemble: Optional[Ensemble] = None) -> BsdeSolution:
    """Mean-field BSDE on the diagonal gamma = eta by Picard iteration on the
    law flow nu, starting from the terminal sample."""
    grid = problem.grid
    if ensemble is None:
        ensemble = simulate_from_measure(problem.coeffs, eta, t, problem.N, problem.seed, stream="eta")
    laws = FrozenLaws(measure=ensemble.paths)
    paths, measure, projectors = conditioned_setup(problem, ensemble, laws)
    terminal = np.asarray(problem.terminal.value(grid, grid.T, paths, measure), dtype=float)
    nu = np.tile(terminal, (grid.M + 1, 1))
    gaps = []
    k0 = ensemble.k0
    sol = None
    n_iter = problem.fixed_iterations or problem.max_iter
    for m in range(n_iter):
        sol = solve_bsde_regression(problem, frozen_laws=FrozenLaws(ensemble.paths, nu),
                                    ensemble=ensemble, projectors=projectors)
        if not problem.generator.uses_nu:
            gaps.append(0.0)
            break
        new = sol.nu
        gaps.append(max(w1d(new[k], nu[k]) for k in range(k0, grid.M + 1)))
        nu = new
        if problem.fixed_iterations is None and gaps[-1] < problem.law_tol:
            break
    else:
        if problem.fixed_iterations is None:
            raise ConvergenceError(f"law Picard did not reach tol {problem.law_tol} in {n_iter} iterations",
                                   gaps)
    sol.gaps = gaps
    sol.iterations = len(gaps)
    sol.laws = FrozenLaws(ensemble.paths, sol.nu if problem.generator.uses_nu else nu)
    return sol


def is_geometric(gaps, n: int = 3) -> bool:
    """Ratios of the last n consecutive gaps all below one."""
    g = np.asarray(gaps, dtype=float)
    if g.size < n + 1:
        return bool(g.size >= 2 and np.all(g[1:] < g[:-1]))
    tail = g[-(n + 1):]
    return bool(np.all(tail[1:] < tail[:-1]))


Coef = Union[float, np.ndarray, Callable]


@dataclass
class LinearMfBsde:
    """dY = -(alpha Y + beta.Z + E~[g(r, c~) Y~] + h) dr + Z dB, Y_T = xi.

    alpha: scalar or (N, M+1); beta: (d,) or (N, M+1, d); g: scalar or
    g(t, c) -> (N,) on the carrier values c (N, q) at t; h: scalar or
    (N, M+1).  mf_operator(k, Y_k) -> scalar or (N,) replaces the
    E~[g Y~] term when given.  dB (N, M, d) and features (N, M+1, q) default
    to a standard Brownian ensemble.
    """
    xi: Coef = 1.0
    alpha: Coef = 0.0
    beta: Coef = 0.0
    g: Coef = 0.0
    h: Coef = 0.0
    carrier: Optional[np.ndarray] = None
    mf_operator: Optional[Callable] = None
    dB: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    k0: int = 0
    d: int = 1
    tol: float = 1e-6
    max_iter: int = 50


def _per_node(c, N, M, tail=()):
    return np.broadcast_to(np.asarray(c, dtype=float), (N, M + 1) + tuple(tail))


def solve_linear_mf_bsde(spec: LinearMfBsde, grid: TimeGrid, N: int, seed: int,
                         projectors: Optional[ProjectorSet] = None) -> BsdeSolution:
    """Picard iteration on the mean-field term, each pass a regression solve."""
    M, d = grid.M, spec.d
    dB = spec.dB
    if dB is None:
        dB = np.sqrt(grid.dt) * gaussian_table(seed, "linear-mf", np.arange(N), M, d)
        dB[:, :spec.k0] = 0.0
    N = dB.shape[0]
    if projectors is None:
        feats = spec.features
        if feats is None:
            feats = np.concatenate([np.zeros((N, 1, d)), np.cumsum(dB, axis=1)], axis=1)
        projectors = ProjectorSet(FeatureMap(grid, np.asarray(feats), (), 2))
    alpha = _per_node(spec.alpha, N, M)
    beta = _per_node(spec.beta, N, M, (d,))
    h = _per_node(spec.h, N, M)
    xi = np.broadcast_to(np.asarray(spec.xi, dtype=float), (N,)).copy()
    if spec.mf_operator is not None:
        op = spec.mf_operator
    elif callable(spec.g):
        op = lambda k, y: np.mean(spec.g(grid.time(k), spec.carrier[:, k]) * y)
    else:
        gc = float(spec.g)
        op = (lambda k, y: gc * np.mean(y)) if gc else None

    k0 = spec.k0
    if op is None:
        res = linear_sweep(grid, k0, xi, dB, projectors, alpha, beta, h)
        return _sweep_solution(grid, k0, res, projectors=projectors, gaps=[0.0], iterations=1)

    Yprev = np.zeros((N, M + 1))
    gaps = []
    for m in range(spec.max_iter):
        frozen = Yprev
        res = linear_sweep(grid, k0, xi, dB, projectors, alpha, beta, h,
                           mf=lambda k: op(k, frozen[:, k]))
        diff = res.Y[:, k0:] - Yprev[:, k0:]
        gaps.append(float(np.max(np.sqrt(np.mean(diff ** 2, axis=0)))))
        Yprev = res.Y
        if gaps[-1] < spec.tol:
            break
    else:
        raise ConvergenceError(f"linear mean-field Picard did not reach tol {spec.tol}", gaps)
    return _sweep_solution(grid, k0, res, projectors=projectors, gaps=gaps, iterations=len(gaps))
