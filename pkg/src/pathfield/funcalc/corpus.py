"""Named test functionals and the analytic-vs-finite-difference derivative check.

The corpus covers the single-leaf shapes (evaluation, running integral,
measure evaluation, measure integral) and the five-leaf composite.  Every
builder takes a Generator so that each probe can draw a fresh smooth
instance.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..pathspace import TimeGrid
from .dsl import (FunctionalSpec, MeasureEval, MeasureIntegral, PathEval, RunningIntegral,
                  example_composite, single)
from .fd import FdConfig, fd_d_mu, fd_d_omega
from .smooth import ExpScalar, Polynomial, Sine, SmoothMap

CORPUS = ("path-eval", "running-integral", "measure-eval", "measure-integral", "composite")


def _scalar_map(rng: np.random.Generator, dim: int = 1) -> SmoothMap:
    kind = rng.integers(3)
    a = rng.uniform(-1.0, 1.0, dim)
    if kind == 0:
        return Sine(rng.uniform(0.5, 1.5), a, rng.uniform(-np.pi, np.pi))
    if kind == 1:
        return ExpScalar(rng.uniform(-1.0, 1.0), 0.5 * a, rng.uniform(-0.5, 0.5))
    # cubic with a time factor on one term
    terms = [(rng.uniform(-1, 1), tuple(int(i == j) for j in range(dim))) for i in range(dim)]
    terms.append((rng.uniform(-0.5, 0.5), (2,) + (0,) * (dim - 1), 1))
    terms.append((rng.uniform(-0.3, 0.3), (3,) + (0,) * (dim - 1)))
    return Polynomial(terms)


def _combiner(rng: np.random.Generator, n: int = 5) -> Polynomial:
    """Quadratic in the leaf values with cross terms, one time-dependent term."""
    terms = []
    for i in range(n):
        e = [0] * n
        e[i] = 1
        terms.append((rng.uniform(-1, 1), tuple(e)))
        e = [0] * n
        e[i] = 2
        terms.append((rng.uniform(-0.5, 0.5), tuple(e)))
    for i in range(n):
        for j in range(i):
            if rng.random() < 0.5:
                e = [0] * n
                e[i] = e[j] = 1
                terms.append((rng.uniform(-0.5, 0.5), tuple(e)))
    e = [0] * n
    e[0] = 1
    terms.append((rng.uniform(-0.5, 0.5), tuple(e), 1))
    return Polynomial(terms)


def corpus_functional(name: str, rng: Optional[np.random.Generator] = None) -> FunctionalSpec:
    """One random smooth instance of a corpus shape (d = 1).

    path-eval         h(t, omega(t))
    running-integral  int_0^t F(r, omega(r)) dr
    measure-eval      E^mu[h(t, W(t))]
    measure-integral  E^mu[int_0^t F(r, W(r)) dr]
    composite         F(t, omega(t), int f1(omega), E f2(W(t)), E int f3(W), E f4(W(t), int f5(W)))
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if name == "path-eval":
        return single(PathEval(_scalar_map(rng)), name)
    if name == "running-integral":
        return single(RunningIntegral(_scalar_map(rng)), name)
    if name == "measure-eval":
        return single(MeasureEval(_scalar_map(rng)), name)
    if name == "measure-integral":
        return single(MeasureIntegral(_scalar_map(rng)), name)
    if name == "composite":
        return example_composite(_combiner(rng), _scalar_map(rng), _scalar_map(rng), _scalar_map(rng),
                                 _scalar_map(rng, 2), _scalar_map(rng))
    raise ValueError(f"unknown corpus functional {name!r}; choose from {CORPUS}")


@dataclass
class Probe:
    j: int
    k: int
    particle: int
    paths: np.ndarray          # (1, M+1, 1)
    measure: np.ndarray        # (P, M+1, 1)


def random_probe(grid: TimeGrid, rng: np.random.Generator, n_particles: int = 10, d: int = 1) -> Probe:
    """Brownian path and particles, t a node in (0, T], tau a node in [0, t]."""
    def bm(n):
        inc = rng.normal(0.0, np.sqrt(grid.dt), (n, grid.M, d))
        x0 = rng.normal(0.0, 0.5, (n, 1, d))
        return np.concatenate([x0, x0 + np.cumsum(inc, axis=1)], axis=1)

    k = int(rng.integers(1, grid.M + 1))
    j = int(rng.integers(0, k + 1))
    return Probe(j, k, int(rng.integers(n_particles)), bm(1), bm(n_particles))


def lift_bias(f: FunctionalSpec, grid, j, t, paths, measure, i) -> np.ndarray:
    """The (1/N) term the second-order particle lift picks up on top of
    d_x~ d_mu f: with leaf values m_l and combiner F it is
    (1/N) sum_lm F_lm K1_l(x~_i) K1_m(x~_i)^T, zero when F is affine in the
    measure leaves."""
    N, d = measure.shape[0], measure.shape[-1]
    L = f._leaf_values(grid, t, paths, measure)
    H = f.combiner.hess(L, t)[0]
    K = np.zeros((len(f.leaves), d))
    for l, leaf in enumerate(f.leaves):
        if leaf.uses_measure:
            K[l] = leaf.d_mu(grid, j, t, paths, measure, measure)[0, i]
    return np.einsum("lm,la,mb->ab", H, K, K) / N


@dataclass
class DerivRow:
    functional: str
    probe: int
    quantity: str
    tau: float
    t: float
    analytic: float
    fd: float
    abs_err: float
    tol: float
    passed: bool

    def as_dict(self):
        return asdict(self)


def check_probe(f: FunctionalSpec, grid: TimeGrid, probe: Probe, cfg: FdConfig,
                name: str = "", index: int = 0) -> list[DerivRow]:
    j, k, i = probe.j, probe.k, probe.particle
    t, tau = grid.time(k), grid.time(j)
    P, Q = probe.paths, probe.measure
    b = f.bundle(grid, j, t, P, Q if f.uses_measure else None, Q if f.uses_measure else None,
                 order=2, want_dt=False)
    x_t = P[:, k, :]
    h1 = float(cfg.steps_path(x_t, 1)[0])
    h2 = float(cfg.steps_path(x_t, 2)[0])
    pairs = []
    if f.uses_path:
        pairs.append(("d_omega", b.d_omega[0], fd_d_omega(f, grid, j, t, P, Q, cfg, 1)[0], 10 * h1 ** 2))
        pairs.append(("d2_omega", b.d2_omega[0], fd_d_omega(f, grid, j, t, P, Q, cfg, 2)[0], 10 * h2))
    if f.uses_measure:
        e1, e2 = cfg.step_lift(Q, 1), cfg.step_lift(Q, 2)
        pairs.append(("d_mu", b.d_mu()[0, i], fd_d_mu(f, grid, j, t, P, Q, i, cfg, 1)[0], 10 * e1 ** 2))
        a2 = b.d2_mu()[0, i] + lift_bias(f, grid, j, t, P, Q, i)
        pairs.append(("d2_mu", a2, fd_d_mu(f, grid, j, t, P, Q, i, cfg, 2)[0], 10 * e2))
    rows = []
    for q, a, e, tol in pairs:
        a, e = np.ravel(a), np.ravel(e)
        err = float(np.max(np.abs(a - e)))
        rows.append(DerivRow(name, index, q, tau, t, float(a[0]), float(e[0]), err, tol, err <= tol))
    return rows


def derivcheck(functionals: Sequence[str] = CORPUS, probes: int = 100, M: int = 100, T: float = 1.0,
               seed: int = 0, n_particles: int = 10, cfg: Optional[FdConfig] = None,
               progress: Optional[Callable[[str, int], None]] = None) -> list[DerivRow]:
    """Analytic bundles against central differences over random probes.

    Each (functional, probe) pair draws its own smooth instance and its own
    (tau, t, omega, mu) from a stream derived from the seed, so results do
    not depend on which functionals are selected or in what order.
    """
    grid = TimeGrid(T, M)
    cfg = cfg or FdConfig()
    rows = []
    for name in functionals:
        if name not in CORPUS:
            raise ValueError(f"unknown corpus functional {name!r}; choose from {CORPUS}")
        for p in range(probes):
            rng = np.random.default_rng([seed, CORPUS.index(name), p])
            f = corpus_functional(name, rng)
            rows += check_probe(f, grid, random_probe(grid, rng, n_particles), cfg, name, p)
            if progress is not None:
                progress(name, p)
    return rows


def summarize(rows: Sequence[DerivRow]) -> dict:
    """Worst abs_err / tol per functional:quantity, with the all-rows verdict."""
    out = {}
    for r in rows:
        key = f"{r.functional}:{r.quantity}"
        cur = out.setdefault(key, {"worst_ratio": -1.0, "abs_err": 0.0, "tol": 0.0, "passed": True})
        if r.abs_err / r.tol > cur["worst_ratio"]:
            cur.update(worst_ratio=r.abs_err / r.tol, abs_err=r.abs_err, tol=r.tol)
        cur["passed"] = cur["passed"] and r.passed
    return out
