import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pathfield.pathspace import (Coupling, DiscretePath, DomainError, ParticleMeasure, ShapeError, TimeGrid,
                                 bump_particle, bump_path, concat_path, measure_moment, stop_measure, stop_path,
                                 sup_norm, w2_estimate)

M = 8
G = TimeGrid(1.0, M)
finite = st.floats(-10, 10, allow_nan=False, width=64)
path_values = arrays(np.float64, (M + 1, 1), elements=finite)
node = st.integers(0, M)


def test_grid_nodes():
    g = TimeGrid(2.0, 5)
    assert g.nodes[0] == 0 and g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)


@pytest.mark.parametrize("T, M_", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects(T, M_):
    with pytest.raises(DomainError):
        TimeGrid(T, M_)


def test_cadlag_evaluation(grid4, ramp):
    assert ramp(0.3)[0] == 1.0       # [0.25, 0.5) carries v_1
    assert ramp(1.0)[0] == 4.0


def test_stop_examples(grid4, ramp):
    assert stop_path(ramp, 0.5).values[:, 0].tolist() == [0, 1, 2, 2, 2]
    assert stop_path(ramp, 1.0) == ramp
    assert stop_path(ramp, 0.0).values[:, 0].tolist() == [0] * 5
    with pytest.raises(DomainError):
        stop_path(ramp, 1.5)


def test_snapping_and_strict(ramp):
    assert stop_path(ramp, 0.49).values[:, 0].tolist() == [0, 1, 2, 2, 2]
    with pytest.raises(DomainError):
        stop_path(ramp, 0.49, strict=True)


def test_bump_examples(grid4, ramp):
    zero = DiscretePath.constant(grid4, 0.0)
    assert bump_path(zero, 0.5, 1.0).values[:, 0].tolist() == [0, 0, 1, 1, 1]
    assert bump_path(ramp, 0.0, 2.0).values[:, 0].tolist() == [2, 3, 4, 5, 6]
    assert bump_path(bump_path(ramp, 0.25, 3.0), 0.25, -3.0) == ramp
    with pytest.raises(DomainError):
        bump_path(ramp, 0.3, 1.0)


def test_concat_examples(grid4, ramp):
    ones = DiscretePath.constant(grid4, 1.0)
    assert concat_path(ones, ramp, 0.5).values[:, 0].tolist() == [1, 1, 1, 2, 3]
    assert concat_path(ramp, ramp, 0.5) == ramp
    zero = DiscretePath.constant(grid4, 0.0)
    assert concat_path(zero, ramp, 0.0) == DiscretePath(grid4, ramp.values - ramp.values[0])
    with pytest.raises(ShapeError):
        concat_path(ramp, DiscretePath.constant(TimeGrid(1.0, 5), 0.0), 0.5)


def test_sup_norm_examples():
    g = TimeGrid(1.0, 2)
    assert sup_norm(DiscretePath(g, [0, -3, 2])) == 3
    assert sup_norm(DiscretePath.constant(g, 0.0)) == 0
    assert sup_norm(DiscretePath(g, [-5, 1, 2]), (0.0, 0.0)) == 5
    with pytest.raises(DomainError):
        sup_norm(DiscretePath(g, [0, 1, 2]), (0.8, 0.2))


def test_moment_examples(grid4):
    assert measure_moment(ParticleMeasure(grid4, np.full((1, 5, 1), 2.0))) == 2.0
    two = ParticleMeasure(grid4, np.stack([np.full((5, 1), 3.0), np.full((5, 1), -4.0)]))
    assert measure_moment(two) == pytest.approx(5 / np.sqrt(2), abs=1e-15)
    assert bump_particle(two, 0, 0.0, 0.0).values.tolist() == two.values.tolist()


def test_w2_examples(grid4):
    rng = np.random.default_rng(0)
    mu = ParticleMeasure(grid4, rng.normal(size=(6, 5, 1)))
    assert w2_estimate(mu, mu) == 0
    assert w2_estimate(mu, ParticleMeasure(grid4, mu.values + 0.7)) == pytest.approx(0.7, abs=1e-14)
    a = ParticleMeasure(grid4, np.zeros((1, 5, 1)))
    b = ParticleMeasure(grid4, np.ones((1, 5, 1)))
    assert w2_estimate(a, b) == 1.0
    assert w2_estimate(a, b, Coupling("sorted-1d")) == 1.0
    with pytest.raises(ShapeError):
        w2_estimate(a, mu)


def test_sorted_coupling_is_exact_marginal(grid4):
    a = ParticleMeasure(grid4, np.array([0.0, 2.0])[:, None, None] * np.ones((2, 5, 1)))
    b = ParticleMeasure(grid4, np.array([2.0, 0.0])[:, None, None] * np.ones((2, 5, 1)))
    assert w2_estimate(a, b, Coupling("sorted-1d")) == 0.0
    assert w2_estimate(a, b) == 2.0


def test_immutable(ramp):
    with pytest.raises((AttributeError, ValueError)):
        ramp.values[0, 0] = 9.0
    with pytest.raises(AttributeError):
        ramp.grid = None


def test_particle_ids_follow_permutation(grid4):
    mu = ParticleMeasure(grid4, np.arange(15.0).reshape(3, 5, 1))
    p = mu.permuted([2, 0, 1])
    assert p.ids.tolist() == [2, 0, 1]
    assert stop_measure(p, 0.5).ids.tolist() == [2, 0, 1]


@given(path_values, node)
def test_stop_idempotent(v, k):
    w = DiscretePath(G, v)
    t = G.time(k)
    assert stop_path(stop_path(w, t), t) == stop_path(w, t)


@given(path_values, node, node, finite)
def test_stop_bump_commute(v, j, k, x):
    j, k = min(j, k), max(j, k)
    w = DiscretePath(G, v)
    lhs = stop_path(bump_path(w, G.time(j), x), G.time(k))
    rhs = stop_path(bump_path(stop_path(w, G.time(k)), G.time(j), x), G.time(k))
    assert np.array_equal(lhs.values, rhs.values)


@given(path_values, path_values, node, node)
def test_concat_flow(g, w, i, j):
    t, s = sorted((G.time(i), G.time(j)))
    gamma, omega = DiscretePath(G, g), DiscretePath(G, w)
    c = concat_path(gamma, omega, t)
    assert np.allclose(concat_path(c, omega, s).values, c.values, atol=1e-12)
    assert c(t)[0] == gamma(t)[0]


@settings(max_examples=50)
@given(arrays(np.float64, (3, 3, M + 1, 1), elements=finite))
def test_w2_index_metric(v):
    a, b, c = (ParticleMeasure(G, x) for x in v)
    ab, ba = w2_estimate(a, b), w2_estimate(b, a)
    assert ab >= 0 and ab == ba
    assert w2_estimate(a, c) <= ab + w2_estimate(b, c) + 1e-9


@given(arrays(np.float64, (4, M + 1, 1), elements=finite), finite)
def test_moment_triangle(v, x):
    mu = ParticleMeasure(G, v)
    shifted = ParticleMeasure(G, v + x)
    assert measure_moment(shifted) <= measure_moment(mu) + abs(x) + 1e-9
