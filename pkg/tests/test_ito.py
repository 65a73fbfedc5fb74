import numpy as np
import pytest

from pathfield.forward import DiffusionCoeffs
from pathfield.funcalc import (Affine, MeasureEval, PathEval, Polynomial, RunningIntegral, corpus_functional,
                               single)
from pathfield.ito import TERMS, ito_decomposition, partial_ito_decomposition
from pathfield.parallel import threads
from pathfield.pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid

STD = DiffusionCoeffs.standard()
G = TimeGrid(1.0, 50)
ZERO = DiscretePath.constant(G, 0.0)
ETA = ParticleMeasure(G, np.zeros((1, G.M + 1, 1)))


def test_identity_is_exact_per_sample():
    rep = ito_decomposition(single(PathEval(Affine([1.0]))), STD, 0.0, 1.0, ZERO, ETA, 200, 1)
    assert np.max(np.abs(rep.samples["residual"])) < 1e-13


def test_affine_with_drift_is_exact():
    co = DiffusionCoeffs(b1=0.3, sigma1=0.7)
    f = single(PathEval(Affine([2.0], 1.0)))
    rep = ito_decomposition(f, co, 0.2, 0.8, ZERO, ETA, 200, 2)
    assert np.max(np.abs(rep.samples["residual"])) < 1e-13


def test_square_band_and_bookkeeping():
    rep = ito_decomposition(single(PathEval(Polynomial([(1.0, [2])]))), STD, 0.0, 1.0, ZERO, ETA, 4000, 3)
    assert rep.passes(3.0)
    total = sum(rep.samples[k] for k in TERMS) + rep.samples["residual"]
    assert np.allclose(total, rep.samples["lhs"], atol=1e-13)
    # residual is sum (dX^2 - dt): variance 2 dt T
    assert rep.residual_stderr == pytest.approx(np.sqrt(2 * G.dt / 4000), rel=0.1)


def test_measure_eval_martingale():
    rep = ito_decomposition(single(MeasureEval(Affine([1.0]))), STD, 0.0, 1.0, ZERO, ETA, 2000, 4)
    assert rep.passes(3.0)
    # the d_mu term averages the shared X' ensemble, so its noise is 1/sqrt(N')
    assert abs(rep.terms["d_mu"]) < 3 / np.sqrt(2000)


def test_partial_examples():
    # f(v, omega) = omega(v): exact
    rep = partial_ito_decomposition(single(PathEval(Affine([1.0]))), STD, 1.0, 0.0, 0.6, ZERO, ETA, 200, 5)
    assert np.max(np.abs(rep.samples["residual"])) < 1e-13
    # running integral with v = T, s < T: the SVD is T - r
    f = single(RunningIntegral(Affine([1.0])))
    rep = partial_ito_decomposition(f, STD, 1.0, 0.0, 0.8, ZERO, ETA, 4000, 6)
    assert rep.terms["time"] == 0.0
    assert rep.passes(3.0)


def test_bad_arguments():
    f = single(PathEval(Affine([1.0])))
    with pytest.raises(DomainError):
        ito_decomposition(f, STD, 0.5, 0.2, ZERO, ETA, 100, 0)
    with pytest.raises(DomainError):
        ito_decomposition(f, STD, 0.0, 1.0, ZERO, ETA, 1, 0)
    with pytest.raises(DomainError):
        partial_ito_decomposition(f, STD, 0.5, 0.0, 0.8, ZERO, ETA, 100, 0)


def test_thread_count_does_not_change_bits():
    f = corpus_functional("composite", np.random.default_rng(4))
    g = TimeGrid(1.0, 10)
    z = DiscretePath.constant(g, 0.0)
    eta = ParticleMeasure(g, np.zeros((1, g.M + 1, 1)))
    a = ito_decomposition(f, STD, 0.0, 1.0, z, eta, 5000, 8)
    with threads(4):
        b = ito_decomposition(f, STD, 0.0, 1.0, z, eta, 5000, 8)
    assert np.array_equal(a.samples["residual"], b.samples["residual"])


def test_independent_streams():
    f = single(MeasureEval(Affine([1.0])))
    rep = ito_decomposition(f, STD, 0.0, 1.0, ZERO, ETA, 10, 0)
    assert rep.streams[0] != rep.streams[1]


@pytest.mark.slow
def test_mesh_consistency_square():
    f = single(PathEval(Polynomial([(1.0, [2])])))
    errs = []
    for M in (25, 50, 100, 200):
        g = TimeGrid(1.0, M)
        rep = ito_decomposition(f, STD, 0.0, 1.0, DiscretePath.constant(g, 0.0),
                                ParticleMeasure(g, np.zeros((1, M + 1, 1))), 4000, 11)
        errs.append((abs(rep.residual_mean), rep.residual_stderr))
    for (a, sa), (b, sb) in zip(errs, errs[1:]):
        assert b <= a + 2 * np.hypot(sa, sb)
