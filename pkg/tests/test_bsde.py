import numpy as np
import pytest

from pathfield.bsde import (BasePair, BsdeProblem, CallableGenerator, DiffusionCoeffs, LinearMfBsde,
                            SeparableGenerator, VariationKind, is_geometric, solve_bsde_regression,
                            solve_linear_mf_bsde, solve_mf_bsde, solve_variation_bsde)
from pathfield.errors import ConvergenceError
from pathfield.funcalc import (Affine, FunctionalSpec, MeasureEval, PathEval, Polynomial, constant_functional,
                               identity, single)
from pathfield.pathspace import DiscretePath, DomainError, ParticleMeasure, TimeGrid, bump_path
from conftest import bm_measure

G = TimeGrid(1.0, 50)
X_T = single(PathEval(identity()))
GAMMA = DiscretePath(G, np.linspace(0.0, 0.7, G.M + 1))


def test_linear_mean_field_closed_form():
    sol = solve_linear_mf_bsde(LinearMfBsde(xi=1.0, alpha=0.5, g=1.0, tol=1e-8), G, 2000, 1)
    # discrete Picard limit of a deterministic linear ODE with step dt
    assert sol.value == pytest.approx(np.exp(1.5), rel=5e-3)
    assert is_geometric(sol.gaps)


def test_linear_mean_field_gives_up():
    with pytest.raises(ConvergenceError) as e:
        solve_linear_mf_bsde(LinearMfBsde(xi=1.0, alpha=0.5, g=1.0, tol=1e-30, max_iter=3), G, 500, 1)
    assert len(e.value.gaps) == 3


def test_terminal_only_is_martingale():
    p = BsdeProblem(X_T, G, N=2000, seed=2)
    sol = solve_bsde_regression(p, GAMMA, 0.5)
    assert sol.value == pytest.approx(0.35, abs=1e-12)


def test_linear_generator():
    p = BsdeProblem(X_T, G, SeparableGenerator(phi=Affine([1.0])), N=4000, seed=2)
    sol = solve_bsde_regression(p, GAMMA, 0.5)
    exact = np.exp(0.5) * 0.35
    assert abs(sol.value - exact) <= max(3 * sol.stderr, 0.01 * exact)


def test_z_matches_terminal_derivative():
    p = BsdeProblem(single(PathEval(Polynomial([(1.0, [2])]))), G, N=4000, seed=3)
    sol = solve_bsde_regression(p, GAMMA, 0.5)
    k = sol.k0
    # Z = d_omega u = 2 X along the paths
    resid = sol.Z[:, k + 5, 0] - 2 * sol.ensemble.paths[:, k + 5, 0]
    assert np.sqrt(np.mean(resid ** 2)) < 0.05


def test_nonlinear_mean_field():
    gen = SeparableGenerator(c_nu=1.0)
    p = BsdeProblem(constant_functional(1.0), G, gen, N=1000, seed=4, law_tol=1e-8, max_iter=20)
    eta = ParticleMeasure(G, np.zeros((1, G.M + 1, 1)))
    sol = solve_mf_bsde(p, eta, 0.0)
    assert sol.value == pytest.approx(np.e, rel=0.01)
    assert sol.iterations <= 20 and is_geometric(sol.gaps)


def test_mf_convergence_error_carries_gaps():
    gen = SeparableGenerator(c_nu=1.0)
    p = BsdeProblem(constant_functional(1.0), G, gen, N=200, seed=4, law_tol=1e-15, max_iter=2)
    with pytest.raises(ConvergenceError) as e:
        solve_mf_bsde(p, ParticleMeasure(G, np.zeros((1, G.M + 1, 1))), 0.0)
    assert len(e.value.gaps) == 2


def test_law_invariance_under_permutation():
    Phi = FunctionalSpec(Affine([1.0, 1.0]), [PathEval(identity()), MeasureEval(Polynomial([(1.0, [2])]))])
    p = BsdeProblem(Phi, G, SeparableGenerator(c_nu=0.5, phi=Affine([0.3])), N=600, seed=5)
    # N a multiple of the particle count, so the tiled ensemble is a permutation
    mu = bm_measure(G, 6, 0)
    a = solve_mf_bsde(p, mu, 0.2)
    b = solve_mf_bsde(p, mu.permuted([5, 3, 1, 0, 2, 4]), 0.2)
    assert b.value == pytest.approx(a.value, rel=1e-9)


def test_callable_generator_matches_separable():
    gen_a = SeparableGenerator(phi=Affine([0.4]))
    gen_b = CallableGenerator(lambda s, y, z: 0.4 * y, uses_nu=False, uses_measure=False)
    a = solve_bsde_regression(BsdeProblem(X_T, G, gen_a, N=1000, seed=6), GAMMA, 0.2)
    b = solve_bsde_regression(BsdeProblem(X_T, G, gen_b, N=1000, seed=6), GAMMA, 0.2)
    assert b.value == pytest.approx(a.value, rel=1e-10)


def test_drift_coefficients():
    co = DiffusionCoeffs(b1=0.5, sigma1=2.0)
    p = BsdeProblem(X_T, G, coeffs=co, N=1000, seed=7)
    sol = solve_bsde_regression(p, GAMMA, 0.5)
    assert sol.value == pytest.approx(0.35 + 0.25, abs=1e-10)


def test_bad_problem():
    with pytest.raises(DomainError):
        BsdeProblem(X_T, G, N=1)


def _base(p, t=0.5):
    cond = solve_bsde_regression(p, GAMMA, t)
    return BasePair(cond, None, None, t)


def test_path_first_variation():
    p = BsdeProblem(X_T, G, SeparableGenerator(phi=Affine([1.0])), N=4000, seed=8)
    v = solve_variation_bsde(VariationKind("path-first", 0.3), _base(p), p)
    assert v.value == pytest.approx(np.exp(0.5), rel=1e-3)


def test_path_second_variation():
    p = BsdeProblem(single(PathEval(Polynomial([(1.0, [2])]))), G, N=4000, seed=9)
    v = solve_variation_bsde(VariationKind("path-second", 0.3), _base(p), p)
    assert v.value == pytest.approx(2.0, abs=1e-10)


def test_path_variation_matches_fd_with_common_numbers():
    p = BsdeProblem(single(PathEval(Polynomial([(0.5, [2])]))), G, SeparableGenerator(phi=Affine([0.5])),
                    N=4000, seed=10)
    t, tau, h = 0.5, 0.3, 1e-2
    v = solve_variation_bsde(VariationKind("path-first", tau), _base(p, t), p)
    up = solve_bsde_regression(p, bump_path(GAMMA, tau, h), t)
    dn = solve_bsde_regression(p, bump_path(GAMMA, tau, -h), t)
    fd = (up.value - dn.value) / (2 * h)
    assert abs(v.value - fd) <= max(3 * v.stderr, 1e-2)


def test_measure_kernel_needs_diagonal():
    p = BsdeProblem(X_T, G, N=200, seed=1)
    with pytest.raises(ValueError):
        solve_variation_bsde(VariationKind("measure-kernel", 0.3, x_tilde=0), _base(p), p)
    with pytest.raises(ValueError):
        VariationKind("sideways", 0.3)
