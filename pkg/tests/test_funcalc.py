import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathfield.errors import ConfigError, NonAnticipativityError
from pathfield.funcalc import (CORPUS, Affine, FdConfig, FrozenEval, FunctionalSpec, MeasureEval,
                               MeasureIntegral, OpaqueFunctional, PathEval, Polynomial, RunningIntegral,
                               constant_functional, corpus_functional, derivative_bundle, derivcheck,
                               eval_functional, horizontal_derivative, map_from_config, measure_derivative,
                               random_probe, single, strong_vertical_derivative)
from pathfield.funcalc.corpus import check_probe, lift_bias
from pathfield.pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid, bump_path
from conftest import bm_measure, bm_path

square = Polynomial([(1.0, [2])])
ident = Affine([1.0])


def const_measure(grid, vals):
    return ParticleMeasure(grid, np.asarray(vals, float)[:, None, None] * np.ones((len(vals), grid.M + 1, 1)))


def test_eval_examples(grid4, ramp):
    assert eval_functional(single(PathEval(ident)), 0.5, ramp) == 2.0
    one = DiscretePath.constant(grid4, 1.0)
    assert eval_functional(single(RunningIntegral(ident)), 1.0, one) == pytest.approx(1.0, abs=1e-15)
    mu = const_measure(grid4, [1.0, 3.0])
    assert eval_functional(single(MeasureEval(square)), 0.25, one, mu) == 5.0


def test_horizontal_examples():
    g = TimeGrid(1.0, 10)
    two = DiscretePath.constant(g, 2.0)
    f = single(RunningIntegral(square))
    assert horizontal_derivative(f, 0.3, two) == 4.0
    assert horizontal_derivative(single(PathEval(square)), 0.3, two) == 0.0
    mu = const_measure(g, [3.0])
    assert horizontal_derivative(single(MeasureIntegral(ident)), 0.3, two, mu) == 3.0
    # forward difference agrees on the integral
    assert horizontal_derivative(f, 0.3, two, mode="fd") == pytest.approx(4.0, rel=1e-8)
    with pytest.raises(DomainError):
        horizontal_derivative(f, 1.0, two, mode="fd")


def test_svd_examples():
    g = TimeGrid(1.0, 10)
    three = DiscretePath.constant(g, 3.0)
    assert strong_vertical_derivative(single(PathEval(square)), 0.2, 0.6, three)[0] == 6.0
    one = DiscretePath.constant(g, 1.0)
    f = single(RunningIntegral(square))
    assert strong_vertical_derivative(f, 0.5, 1.0, one)[0] == pytest.approx(1.0, abs=1e-14)
    assert strong_vertical_derivative(f, 1.0, 1.0, one)[0] == 0.0
    with pytest.raises(DomainError):
        strong_vertical_derivative(f, 0.7, 0.5, one)


def test_frozen_eval_indicator():
    g = TimeGrid(1.0, 10)
    w = DiscretePath(g, np.linspace(0, 1, 11))
    f = single(FrozenEval(square, 0.5))
    assert strong_vertical_derivative(f, 0.3, 0.8, w)[0] == pytest.approx(1.0)
    assert strong_vertical_derivative(f, 0.6, 0.8, w)[0] == 0.0
    with pytest.raises(NonAnticipativityError):
        eval_functional(f, 0.3, w)


def test_measure_derivative_examples():
    g = TimeGrid(1.0, 10)
    w = DiscretePath.constant(g, 0.0)
    mu = const_measure(g, [2.0, -1.0, 0.5])
    f = single(MeasureEval(square))
    assert measure_derivative(f, 0.3, 0.6, w, mu, 0)[0] == 4.0
    # Richardson pairing removes the eps term exactly for quadratic h
    fd = measure_derivative(f, 0.3, 0.6, w, mu, 0, mode="fd", cfg=FdConfig(lift_eps=1e-3))[0]
    assert fd == pytest.approx(4.0, abs=1e-9)
    raw = measure_derivative(f, 0.3, 0.6, w, mu, 0, mode="fd", cfg=FdConfig(lift_eps=1e-3, richardson=False))[0]
    assert raw == pytest.approx(4.0 + 1e-3, abs=1e-9)
    assert measure_derivative(single(PathEval(square)), 0.3, 0.6, w, mu, 1)[0] == 0.0
    with pytest.raises(DomainError):
        measure_derivative(f, 0.3, 0.6, w, mu, 5)


def test_lift_leaving_smooth_region_is_flagged(caplog):
    g = TimeGrid(1.0, 4)
    kink = OpaqueFunctional(lambda grid, t, P, Q: np.full(P.shape[0], np.mean(np.abs(Q[:, 2, 0]))),
                            uses_path=False)
    mu = const_measure(g, [0.0, 1.0])
    with caplog.at_level("WARNING"):
        measure_derivative(kink, 0.5, 0.5, DiscretePath.constant(g, 0.0), mu, 0, mode="fd")
    assert "leaves the smooth region" in caplog.text


def test_constant_bundle_is_zero(grid4, ramp):
    mu = const_measure(grid4, [1.0, 2.0])
    b = derivative_bundle(constant_functional(2.5), 0.25, 0.5, ramp, mu)
    assert b.value[0] == 2.5
    for x in (b.dt, b.d_omega, b.d2_omega, b.d_mu(), b.d2_mu()):
        assert np.all(x == 0)


def test_opaque_falls_back_to_fd():
    g = TimeGrid(1.0, 20)
    w = bm_path(g, 3)
    opaque = OpaqueFunctional(lambda grid, t, P, Q: P[:, grid.floor_index(t), 0] ** 2, uses_measure=False)
    b = derivative_bundle(opaque, 0.5, 0.5, w)
    assert b.modes["d_omega"] == "fd"
    assert b.d_omega[0, 0] == pytest.approx(2 * w(0.5)[0], abs=1e-7)


def test_composite_closed_forms():
    """Leaf by leaf chain rule at tau = t on a hand-built instance."""
    g = TimeGrid(1.0, 50)
    w, mu = bm_path(g, 1), bm_measure(g, 8, 2)
    F = Polynomial([(1.0, [1, 0, 0]), (0.5, [0, 1, 1]), (1.0, [0, 0, 2])])
    f = FunctionalSpec(F, [PathEval(square), RunningIntegral(ident), MeasureEval(ident)])
    t = 0.6
    k = g.index(t)
    x, I, m = w(t)[0], g.dt * w.values[:k, 0].sum(), mu.values[:, k, 0].mean()
    assert eval_functional(f, t, w, mu) == pytest.approx(x * x + 0.5 * I * m + m * m, abs=1e-12)
    d_om = strong_vertical_derivative(f, t, t, w, mu)[0]
    assert d_om == pytest.approx(2 * x, abs=1e-12)
    d_om_tau = strong_vertical_derivative(f, 0.2, t, w, mu)[0]
    assert d_om_tau == pytest.approx(2 * x + 0.5 * m * (t - 0.2), abs=1e-12)
    assert measure_derivative(f, t, t, w, mu, 3)[0] == pytest.approx(0.5 * I + 2 * m, abs=1e-12)


def test_corpus_names():
    rng = np.random.default_rng(0)
    for name in CORPUS:
        f = corpus_functional(name, rng)
        assert f.uses_path == (name in ("path-eval", "running-integral", "composite"))
    with pytest.raises(ValueError):
        corpus_functional("nope")


def test_derivcheck_small_run():
    rows = derivcheck(probes=5, M=40, seed=3)
    assert rows and all(r.passed for r in rows)
    again = derivcheck(probes=5, M=40, seed=3)
    assert [r.abs_err for r in rows] == [r.abs_err for r in again]


def test_derivcheck_independent_of_selection():
    full = [r for r in derivcheck(probes=3, M=30, seed=9) if r.functional == "composite"]
    alone = derivcheck(("composite",), probes=3, M=30, seed=9)
    assert [r.fd for r in full] == [r.fd for r in alone]


def test_lift_bias_needed_for_nonlinear_combiners():
    g = TimeGrid(1.0, 30)
    f = FunctionalSpec(Polynomial([(1.0, [2])]), [MeasureEval(ident)])
    mu = bm_measure(g, 4, 5)
    P = bm_path(g, 6).values[None]
    # (E W)^2: d_x~ d_mu is 0, the lift sees 2/N
    assert lift_bias(f, g, 10, g.time(20), P, mu.values, 0)[0, 0] == pytest.approx(0.5)
    rows = check_probe(f, g, random_probe(g, np.random.default_rng(0), 4), FdConfig())
    assert all(r.passed for r in rows)


def test_map_from_config_errors():
    assert map_from_config({"kind": "sin", "c": 2.0}).value(np.array([0.0])) == 0.0
    with pytest.raises(ConfigError) as e:
        map_from_config({"kind": "cubic"}, "problem.f")
    assert e.value.path == "problem.f.kind"
    with pytest.raises(ConfigError):
        map_from_config({"c": 1.0})


G = TimeGrid(1.0, 20)
corpus_name = st.sampled_from(CORPUS)
seeds = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=40, deadline=None)
@given(corpus_name, seeds, st.integers(1, G.M - 1), st.integers(1, G.M), st.floats(-3, 3))
def test_non_anticipative(name, seed, k, dk, x):
    rng = np.random.default_rng(seed)
    f = corpus_functional(name, rng)
    w, mu = bm_path(G, seed), bm_measure(G, 3, seed + 1)
    t = G.time(k)
    later = G.time(min(k + dk, G.M))
    if later <= t:
        return
    base = eval_functional(f, t, w, mu)
    assert eval_functional(f, t, bump_path(w, later, x), mu) == base
    bumped = ParticleMeasure(G, np.concatenate([mu.values[:, :G.index(later)],
                                                mu.values[:, G.index(later):] + x], axis=1))
    assert eval_functional(f, t, w, bumped) == base


@settings(max_examples=40, deadline=None)
@given(corpus_name, seeds)
def test_dupire_consistency_and_symmetry(name, seed):
    rng = np.random.default_rng(seed)
    f = corpus_functional(name, rng)
    pr = random_probe(G, rng, 4)
    w, mu = DiscretePath(G, pr.paths[0]), ParticleMeasure(G, pr.measure)
    t = G.time(pr.k)
    a = strong_vertical_derivative(f, t, t, w, mu)
    fd = strong_vertical_derivative(f, t, t, w, mu, mode="fd")
    h1 = 1e-4 * (1 + abs(w(t)[0]))
    assert np.allclose(a, fd, atol=10 * h1 ** 2)
    H = derivative_bundle(f, G.time(pr.j), t, w, mu).d2_omega[0]
    assert np.array_equal(H, H.T)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(-2, 2), st.floats(-2, 2), st.integers(0, G.M), st.integers(0, G.M))
def test_svd_bound_for_lipschitz_functionals(seed, a, b, j, k):
    j, k = min(j, k), max(j, k)
    f = FunctionalSpec(Affine([a, b]), [PathEval(Affine([1.0])), RunningIntegral(Affine([-0.5]))])
    C = f.lipschitz_bound(G.T)
    w = bm_path(G, seed)
    d = strong_vertical_derivative(f, G.time(j), G.time(k), w)
    assert abs(d[0]) <= C + 1e-12
