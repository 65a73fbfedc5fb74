"""Exact decoupling fields for the mollified delay functionals.

With zero drift the forward paths are martingales, so for data affine in
the path values and the measure means the conditional expectation just
stops the arguments at t:

    u(t, omega, mu) = Phi(omega_t, mu_t) + dt * sum_{t_k >= t} f(t_k, omega_t, mu_t).

This is exact on the grid (left-point source quadrature, step paths), and
the derivative fields follow from the analytic bundles of Phi and f.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..bsde.generator import SeparableGenerator
from ..bsde.solvers import BsdeProblem
from ..forward import DiffusionCoeffs
from ..funcalc.dsl import FunctionalSpec, MeasureIntegral, PathEval, RunningIntegral
from ..funcalc.smooth import Affine, Polynomial, identity
from ..pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid, stop_array
from .field import FieldEstimate, MasterProblem
from .mollifier import Mollifier, PointMass, mollify_generator

CASES = ("delay-path", "delay-measure", "delay-mixed", "delay-source", "heat_quadratic")
GUARD_STEPS = 2


class KinkError(DomainError):
    """Derivatives requested where the closed form is not differentiable."""


def _kernel(t0, eps, T):
    if not 0 < t0 < T:
        raise DomainError(f"need 0 < t0 < T, got t0={t0}, T={T}")
    return PointMass(t0) if not eps else Mollifier(t0, eps, T)


class ClosedForm:
    """u-provider backed by an exact formula.

    Calling it gives u(t, omega, mu) with zero stderr; analytic() gives the
    derivative fields entering the master equation, measure terms already
    averaged over mu: d_t, d_omega (d,), d2_omega (d, d), d_mu (d,),
    d_omega_tilde_d_mu (d, d).
    """
    case = ""
    kinks: tuple = ()
    uses_measure = False

    def __call__(self, t: float, omega: DiscretePath, mu: Optional[ParticleMeasure] = None) -> FieldEstimate:
        grid = omega.grid
        return FieldEstimate(self.value(t, omega, mu), 0.0, 0, grid.M)

    def value(self, t, omega, mu=None) -> float:
        raise NotImplementedError

    def analytic(self, t, omega, mu=None) -> dict:
        raise NotImplementedError

    def near_kink(self, grid: TimeGrid, t: float, steps: float = GUARD_STEPS) -> bool:
        return any(abs(t - k) < steps * grid.dt - 1e-12 for k in self.kinks)

    def _check_kink(self, grid, t):
        # at the kink node itself the one-sided derivatives disagree
        if self.near_kink(grid, t, 0.5):
            raise KinkError(f"{self.case}: t={t} is a kink ({self.kinks}); derivatives undefined")

    def master_problem(self, grid: TimeGrid, N: int = 10_000, seed: int = 0,
                       coeffs: Optional[DiffusionCoeffs] = None, preset: str = "general") -> MasterProblem:
        raise NotImplementedError


class LinearClosedForm(ClosedForm):
    """Phi and f affine in path values and measure means, zero drift."""

    def __init__(self, case, terminal: FunctionalSpec, source: Optional[FunctionalSpec], kinks=()):
        self.case = case
        self.terminal = terminal
        self.source = source
        self.kinks = tuple(kinks)
        self.uses_measure = bool(terminal.uses_measure or (source is not None and source.uses_measure))

    def __repr__(self):
        return f"LinearClosedForm({self.case!r})"

    def _args(self, t, omega, mu):
        grid = omega.grid
        k = grid.index(t, strict=True)
        P = stop_array(omega.values[None], k)
        Q = None
        if self.uses_measure:
            if mu is None:
                raise DomainError(f"{self.case} reads the measure argument; pass mu")
            Q = stop_array(mu.values, k)
        return grid, k, P, Q

    def value(self, t, omega, mu=None) -> float:
        grid, k, P, Q = self._args(t, omega, mu)
        out = float(self.terminal.value(grid, grid.T, P, Q)[0])
        if self.source is not None:
            out += grid.dt * sum(float(self.source.value(grid, grid.time(i), P, Q)[0])
                                 for i in range(k, grid.M))
        return out

    def analytic(self, t, omega, mu=None) -> dict:
        grid, k, P, Q = self._args(t, omega, mu)
        self._check_kink(grid, t)
        d = omega.d
        tilde = Q
        bundles = [(1.0, self.terminal.bundle(grid, k, grid.T, P, Q, tilde, order=2, want_dt=False))]
        if self.source is not None:
            bundles += [(grid.dt, self.source.bundle(grid, k, grid.time(i), P, Q, tilde, order=2, want_dt=False))
                        for i in range(k, grid.M)]
        out = {"d_t": 0.0, "d_omega": np.zeros(d), "d2_omega": np.zeros((d, d)),
               "d_mu": np.zeros(d), "d_omega_tilde_d_mu": np.zeros((d, d))}
        for w, b in bundles:
            out["d_omega"] = out["d_omega"] + w * b.d_omega[0]
            out["d2_omega"] = out["d2_omega"] + w * b.d2_omega[0]
            if tilde is not None:
                out["d_mu"] = out["d_mu"] + w * b.mu_mean()[0]
                out["d_omega_tilde_d_mu"] = out["d_omega_tilde_d_mu"] + w * b.mu2_mean()[0]
        # stopping makes Phi(omega_t) flat in t; only the source integral moves
        if self.source is not None and k < grid.M:
            out["d_t"] = -float(self.source.value(grid, grid.time(k), P, Q)[0])
        return out

    def master_problem(self, grid, N=10_000, seed=0, coeffs=None, preset="general") -> MasterProblem:
        gen = SeparableGenerator(source=self.source)
        bsde = BsdeProblem(self.terminal, grid, gen, coeffs or DiffusionCoeffs.standard(), N=N, seed=seed)
        return MasterProblem(bsde, preset)


class HeatQuadratic(ClosedForm):
    """Phi = omega(T)^2, f = 0, d = 1: u(t, gamma) = gamma(t)^2 + (T - t)."""
    case = "heat_quadratic"

    def value(self, t, omega, mu=None) -> float:
        grid = omega.grid
        x = float(omega.values[grid.index(t, strict=True), 0])
        return x * x + (grid.T - grid.time(grid.index(t, strict=True)))

    def analytic(self, t, omega, mu=None) -> dict:
        grid = omega.grid
        x = float(omega.values[grid.index(t, strict=True), 0])
        return {"d_t": -1.0, "d_omega": np.array([2.0 * x]), "d2_omega": np.array([[2.0]]),
                "d_mu": np.zeros(1), "d_omega_tilde_d_mu": np.zeros((1, 1))}

    def master_problem(self, grid, N=10_000, seed=0, coeffs=None, preset="ppde") -> MasterProblem:
        terminal = FunctionalSpec(Affine([1.0]), [PathEval(Polynomial([(1.0, [2])]))], name="omega(T)^2")
        return MasterProblem(BsdeProblem(terminal, grid, SeparableGenerator(), coeffs or DiffusionCoeffs.standard(),
                                         N=N, seed=seed), preset)


@dataclass
class CaseParams:
    """a, b weight the path and measure parts; t0, t1, t2 are the delay
    times; c = (c_path, c_measure) is the linear g of the source case;
    eps = 0 selects the limit."""
    T: float = 1.0
    a: float = 1.0
    b: float = 1.0
    t0: float = 0.5
    t1: float = 0.3
    t2: float = 0.6
    eps: float = 0.0
    c: tuple = (1.0, 1.0)


def _path_part(a, kernel):
    return RunningIntegral(Affine([a]), kernel=kernel)


def _measure_part(b, kernel):
    return MeasureIntegral(Affine([b]), kernel=kernel)


def closed_form_library(case: str, params: Optional[CaseParams] = None, **kw) -> ClosedForm:
    """Exact u-provider for one mollified delay case.

    delay-path      Phi = int rho(t0-s) a omega(s) ds,   u -> a omega(t ^ t0)
    delay-measure   Phi = E^mu[int rho(t0-s) a W(s) ds], u -> E^mu[a W(t ^ t0)]
    delay-mixed     Phi = a omega(t1) + E^mu[b W(t2)] (each part mollified for eps > 0)
    delay-source    Phi as in delay-mixed plus the mollified source of g(x, m) = c.(x, m) at t0
    heat_quadratic  Phi = omega(T)^2, f = 0
    """
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; choose from {CASES}")
    p = params or CaseParams(**kw)
    if params is not None and kw:
        raise ValueError("pass either params or keyword overrides, not both")
    if p.eps < 0:
        raise DomainError("eps must be >= 0")
    if case == "heat_quadratic":
        return HeatQuadratic()
    limit = p.eps == 0
    if case == "delay-path":
        Phi = FunctionalSpec(Affine([1.0]), [_path_part(p.a, _kernel(p.t0, p.eps, p.T))], name="delay-path")
        return LinearClosedForm(case, Phi, None, (p.t0,) if limit else ())
    if case == "delay-measure":
        Phi = FunctionalSpec(Affine([1.0]), [_measure_part(p.a, _kernel(p.t0, p.eps, p.T))], name="delay-measure")
        return LinearClosedForm(case, Phi, None, (p.t0,) if limit else ())
    Phi = FunctionalSpec(Affine([1.0, 1.0]), [_path_part(p.a, _kernel(p.t1, p.eps, p.T)),
                                              _measure_part(p.b, _kernel(p.t2, p.eps, p.T))], name=case)
    kinks = (p.t1, p.t2) if limit else ()
    if case == "delay-mixed":
        return LinearClosedForm(case, Phi, None, kinks)
    k0 = _kernel(p.t0, p.eps, p.T)
    g = Affine(list(p.c))
    f = mollify_generator(g, p.t0, p.eps, p.T) if not limit else \
        FunctionalSpec(Affine([1.0]), [_double(g, k0)], name="source-limit")
    return LinearClosedForm(case, Phi, f, kinks + ((p.t0,) if limit else ()))


def _double(g, kernel):
    from ..funcalc.dsl import DoubleMollified
    return DoubleMollified(g, kernel)


def explicit_delay_path(grid: TimeGrid, t: float, omega: DiscretePath, a: float, t0: float, eps: float) -> float:
    """int_0^t rho(t0-s) a omega(s) ds + a omega(t) int_t^T rho(t0-s) ds on the step path."""
    m = _kernel(t0, eps, grid.T)
    k = grid.index(t, strict=True)
    w = m.masses(grid, grid.time(k))
    return float(a * (w @ omega.values[:-1, 0]) + a * omega.values[k, 0] * m.tail_mass(grid, grid.time(k)))


def explicit_delay_measure(grid: TimeGrid, t: float, mu: ParticleMeasure, a: float, t0: float, eps: float) -> float:
    """E^mu of the delay-path formula, particle by particle."""
    return float(np.mean([explicit_delay_path(grid, t, p, a, t0, eps) for p in mu.particles]))


def limit_value(case: str, t: float, omega: DiscretePath, mu: Optional[ParticleMeasure] = None,
                params: Optional[CaseParams] = None) -> float:
    """The eps -> 0 closed forms a omega(t ^ t0), E^mu[a W(t ^ t0)] and the
    mixed case a omega(t ^ t1) + E^mu[b W(t ^ t2)], read off the step paths."""
    p = params or CaseParams()
    grid = omega.grid

    def at(path_vals, s):
        return path_vals[..., grid.floor_index(min(t, s)), 0]

    if case == "delay-path":
        return float(p.a * at(omega.values, p.t0))
    if case == "delay-measure":
        return float(p.a * np.mean(at(mu.values, p.t0)))
    if case == "delay-mixed":
        return float(p.a * at(omega.values, p.t1) + p.b * np.mean(at(mu.values, p.t2)))
    raise ValueError(f"no explicit limit for {case!r}")
