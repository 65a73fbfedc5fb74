"""Linear variation BSDEs: derivatives of the solution in the path and in the
initial measure, assembled from generator and terminal derivative bundles
along a base solution.

Every kind reduces to the same linear equation

    dV = -(alpha V + beta.W + source [+ mean-field term]) dr + W dB,

with alpha = d_y f and beta = d_z f along the base solution, solved by the
regression projectors of that base solution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..forward import simulate_forward
from ..funcalc.dsl import FunctionalSpec, track
from ..funcalc.fd import FdConfig, fd_bundle
from ..pathspace import DiscretePath, DomainError, ParticleMeasure
from .generator import Slot
from .regression import linear_sweep
from .solvers import (BsdeProblem, BsdeSolution, FrozenLaws, LinearMfBsde, _sweep_solution,
                      solve_bsde_regression, solve_linear_mf_bsde)

log = logging.getLogger(__name__)

X_GROUPS = 10
KINDS = ("path-first", "path-second", "measure-kernel", "measure-kernel-second", "measure-first-coupled")


@dataclass(frozen=True)
class VariationKind:
    """tag, cut-off tau, coordinate of the bump direction, and for measure
    kinds the sample path x~: a particle index of the initial measure (its
    continuations are read off the diagonal ensemble) or a DiscretePath
    (strict mode, fresh continuations)."""
    tag: str
    tau: float
    coord: int = 0
    x_tilde: Optional[Union[int, DiscretePath]] = None

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ValueError(f"unknown variation kind {self.tag!r}; choose from {KINDS}")


@dataclass
class BasePair:
    """Conditioned solution from gamma_t and (for measure kinds) the diagonal
    mean-field solution from eta_t ~ mu, both with the same frozen laws."""
    conditioned: BsdeSolution
    diagonal: Optional[BsdeSolution] = None
    eta: Optional[ParticleMeasure] = None
    t: float = 0.0


class _Along:
    """Generator slots and coefficients along one base solution."""

    def __init__(self, problem: BsdeProblem, sol: BsdeSolution):
        self.problem, self.sol = problem, sol
        self.grid = problem.grid
        self.paths = track(sol.ensemble.paths)
        laws = sol.laws or FrozenLaws()
        self.measure = None if laws.measure is None else track(np.asarray(laws.measure))
        self.nu = laws.nu
        self.k0 = sol.k0

    def slot(self, k):
        return Slot(self.grid, k, self.paths, self.measure, None if self.nu is None else self.nu[k])

    def ks(self):
        return range(self.k0, self.grid.M + 1)

    def coefficients(self):
        B, M = self.sol.Y.shape[0], self.grid.M
        d = self.sol.Z.shape[2]
        alpha = np.zeros((B, M + 1))
        beta = np.zeros((B, M + 1, d))
        gen = self.problem.generator
        for k in self.ks():
            s = self.slot(k)
            alpha[:, k] = gen.dy(s, self.sol.Y[:, k], self.sol.Z[:, k])
            beta[:, k] = gen.dz(s, self.sol.Y[:, k], self.sol.Z[:, k])
        return alpha, beta

    def per_node(self, fn):
        out = np.zeros((self.sol.Y.shape[0], self.grid.M + 1))
        for k in self.ks():
            out[:, k] = fn(k, self.slot(k), self.sol.Y[:, k], self.sol.Z[:, k])
        return out

    def terminal_bundle(self, j, tilde=None, order=1):
        phi = self.problem.terminal
        grid = self.grid
        if isinstance(phi, FunctionalSpec):
            return phi.bundle(grid, j, grid.T, self.paths, self.measure, tilde, order=order, want_dt=False)
        if tilde is not None:
            raise NotImplementedError("opaque terminal: measure kernel at foreign sample paths")
        log.warning("terminal %r has no analytic bundle; using finite differences", phi)
        return fd_bundle(phi, grid, j, grid.T, np.asarray(self.paths),
                         None if self.measure is None else np.asarray(self.measure), FdConfig(),
                         with_measure=False, order=order, want_dt=False)

    def sweep(self, terminal, source, mf=None):
        alpha, beta = self.coefficients()
        res = linear_sweep(self.grid, self.k0, terminal, self.sol.ensemble.dB, self.sol.projectors,
                           alpha, beta, source, mf)
        return _sweep_solution(self.grid, self.k0, res, ensemble=self.sol.ensemble,
                               laws=self.sol.laws, projectors=self.sol.projectors)

    def mf_sweep(self, terminal, source):
        """Companion with the Gateaux mean-field term E~[d_nu f(Y~) V~]."""
        gen = self.problem.generator
        if not gen.uses_nu:
            return self.sweep(terminal, source)
        alpha, beta = self.coefficients()
        Y, Z = self.sol.Y, self.sol.Z
        spec = LinearMfBsde(xi=terminal, alpha=alpha, beta=beta, h=source, dB=self.sol.ensemble.dB,
                            k0=self.k0, d=Z.shape[2],
                            mf_operator=lambda k, v: gen.nu_gateaux(self.slot(k), Y[:, k], Z[:, k], v))
        out = solve_linear_mf_bsde(spec, self.grid, Y.shape[0], 0, projectors=self.sol.projectors)
        out.ensemble, out.laws = self.sol.ensemble, self.sol.laws
        return out


def _cut(grid, tau, k0):
    j = grid.index(tau, strict=False)
    if j > k0:
        raise DomainError(f"cut-off tau={tau} after the start time t={grid.time(k0)}")
    return j


def path_first(problem: BsdeProblem, sol: BsdeSolution, tau: float, coord: int = 0) -> BsdeSolution:
    """d_{omega_tau} (Y, Z): source d_{omega_tau} f, terminal d_{omega_tau} Phi."""
    a = _Along(problem, sol)
    j = _cut(a.grid, tau, a.k0)
    gen = problem.generator
    xi = a.terminal_bundle(j).d_omega[:, coord]
    src = a.per_node(lambda k, s, y, z: gen.d_omega(s, j, y, z, 1)[:, coord])
    return a.sweep(xi, src)


def path_second(problem: BsdeProblem, sol: BsdeSolution, tau: float,
                first: Optional[BsdeSolution] = None) -> BsdeSolution:
    """d^2_{omega_tau} Y for d = 1: the source is the second derivative of the
    generator along (bump, d Y, d Z), cross terms included."""
    if sol.Z.shape[2] != 1:
        raise NotImplementedError("path-second variation is implemented for d = 1")
    a = _Along(problem, sol)
    j = _cut(a.grid, tau, a.k0)
    first = first or path_first(problem, sol, tau)
    gen = problem.generator
    xi = a.terminal_bundle(j, order=2).d2_omega[:, 0, 0]
    src = a.per_node(lambda k, s, y, z: gen.second_directional(s, j, y, z, first.Y[:, k], first.Z[:, k]))
    return a.sweep(xi, src)


@dataclass
class _XEnsemble:
    """Continuations B^{x~_t} of the sample path with their solution pieces."""
    paths: np.ndarray          # (P, M+1, d)
    Y: np.ndarray              # (P, M+1)
    D: np.ndarray              # path-first variation along them (P, M+1)
    D2: Optional[np.ndarray]   # path-second variation (d = 1) or None
    rows: Optional[np.ndarray]  # row indices inside the diagonal ensemble (reuse mode)

    def subset(self, i):
        return _XEnsemble(self.paths[i], self.Y[i], self.D[i], None if self.D2 is None else self.D2[i],
                          None if self.rows is None else self.rows[i])


def _x_ensemble(problem, base: BasePair, kind: VariationKind, order: int) -> _XEnsemble:
    diag = base.diagonal
    if isinstance(kind.x_tilde, (int, np.integer)):
        i = int(kind.x_tilde)
        rows = np.nonzero(diag.ensemble.source == i)[0]
        if rows.size == 0:
            raise DomainError(f"no diagonal rows start from particle {i}")
        D_full = path_first(problem, diag, kind.tau, kind.coord)
        D2 = None
        if order == 2:
            D2 = path_second(problem, diag, kind.tau, D_full).Y[rows]
        return _XEnsemble(diag.ensemble.paths[rows], diag.Y[rows], D_full.Y[rows], D2, rows)
    if not isinstance(kind.x_tilde, DiscretePath):
        raise ValueError("x_tilde must be a particle index or a DiscretePath")
    # strict mode: fresh continuations of x~ under the measure dynamics
    ens = simulate_forward(problem.coeffs, kind.x_tilde, base.t, problem.N, problem.seed,
                           stream="x-tilde", which=2)
    sol = solve_bsde_regression(problem, frozen_laws=diag.laws, ensemble=ens)
    D = path_first(problem, sol, kind.tau, kind.coord)
    D2 = path_second(problem, sol, kind.tau, D).Y if order == 2 else None
    return _XEnsemble(ens.paths, sol.Y, D.Y, D2, None)


def _nu_source(a: _Along, xe: _XEnsemble, diag_N: int, order: int):
    """E_x[d_nu f(Y^x) D^x] (order 1) or its x~ derivative
    E_x[d_y~ d_nu f(Y^x) (D^x)^2 + d_nu f(Y^x) D2^x] (order 2), per node."""
    gen = a.problem.generator
    if not gen.uses_nu:
        return np.zeros((a.sol.Y.shape[0], a.grid.M + 1))

    def fn(k, s, y, z):
        if order == 1 and xe.rows is not None:
            direction = np.zeros(diag_N)
            direction[xe.rows] = xe.D[:, k] * (diag_N / xe.rows.size)
            return gen.nu_gateaux(s, y, z, direction)
        k1 = gen.nu_kernel(s, y, z, xe.Y[:, k], 1)
        out = np.mean(k1 * (xe.D[:, k] if order == 1 else xe.D2[:, k])[None, :], axis=1)
        if order == 2:
            k2 = gen.nu_kernel(s, y, z, xe.Y[:, k], 2)
            out = out + np.mean(k2 * (xe.D[:, k] ** 2)[None, :], axis=1)
        return np.broadcast_to(out, y.shape)
    return a.per_node(fn)


def measure_kernel(problem: BsdeProblem, base: BasePair, kind: VariationKind, order: int = 1):
    """d_{mu_tau} Y(x~) (order 1) or d_{x~_tau} d_{mu_tau} Y(x~) (order 2, d = 1)
    along the conditioned solution; the diagonal companion is solved first."""
    if base.diagonal is None:
        raise ValueError("measure variations need the diagonal base solution")
    if order == 2 and base.conditioned.Z.shape[2] != 1:
        raise NotImplementedError("second-order measure variation is implemented for d = 1")
    grid = problem.grid
    gen = problem.generator
    c = kind.coord

    def solve_for(xe: _XEnsemble):
        tilde = track(xe.paths)

        def pieces(a: _Along):
            j = _cut(grid, kind.tau, a.k0)
            if order == 1:
                xi = a.terminal_bundle(j, tilde, 1).mu_mean()[:, c] if problem.terminal.uses_measure \
                    else np.zeros(a.sol.Y.shape[0])
                src = a.per_node(lambda k, s, y, z: gen.mu_kernel_mean(s, j, y, z, tilde, 1)[:, c])
            else:
                xi = a.terminal_bundle(j, tilde, 2).mu2_mean()[:, 0, 0] if problem.terminal.uses_measure \
                    else np.zeros(a.sol.Y.shape[0])
                src = a.per_node(lambda k, s, y, z: gen.mu_kernel_mean(s, j, y, z, tilde, 2)[:, 0, 0])
            return xi, src + _nu_source(a, xe, base.diagonal.Y.shape[0], order)

        companion = None
        if gen.uses_nu:
            xi_d, src_d = pieces(_Along(problem, base.diagonal))
            companion = _Along(problem, base.diagonal).mf_sweep(xi_d, src_d)
        ac = _Along(problem, base.conditioned)
        xi_c, src_c = pieces(ac)
        if companion is not None:
            src_c = src_c + ac.per_node(
                lambda k, s, y, z: gen.nu_gateaux(s, y, z, companion.Y[:, k]))
        out = ac.sweep(xi_c, src_c)
        out.gaps = [] if companion is None else companion.gaps
        return out

    xe = _x_ensemble(problem, base, kind, order)
    out = solve_for(xe)
    # the result is linear in the x~-average: equal groups give its sampling error
    n = xe.paths.shape[0]
    K = min(X_GROUPS, n // 2)
    if K >= 2:
        idx = np.array_split(np.arange(n - n % K), K)
        vals = [solve_for(xe.subset(i)).value for i in idx]
        out.extra_var = float(np.var(vals, ddof=1) / K)
    return out


def solve_variation_bsde(kind: VariationKind, base: BasePair, problem: BsdeProblem) -> BsdeSolution:
    """Variation process of the requested kind; Y at the start node estimates
    the derivative of the decoupling field."""
    if kind.tag == "path-first":
        return path_first(problem, base.conditioned, kind.tau, kind.coord)
    if kind.tag == "path-second":
        return path_second(problem, base.conditioned, kind.tau)
    if kind.tag == "measure-kernel":
        return measure_kernel(problem, base, kind, 1)
    if kind.tag == "measure-kernel-second":
        return measure_kernel(problem, base, kind, 2)
    raise NotImplementedError("measure-first-coupled variations (Gateaux derivative against a random "
                              "direction) are covered through the measure-kernel representation")
