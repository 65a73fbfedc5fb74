"""Desk-scale acceptance checks, one test group per criterion.

Run with `pytest tests/test_acceptance.py -v`; the terminal summary prints
one PASS/FAIL line per criterion with the measured figures.
"""
import numpy as np
import pytest
import yaml

from pathfield.bsde import (BsdeProblem, LinearMfBsde, SeparableGenerator, is_geometric, solve_bsde_regression,
                            solve_linear_mf_bsde, solve_mf_bsde)
from pathfield.cli import main
from pathfield.forward import DiffusionCoeffs
from pathfield.funcalc import (CORPUS, Affine, FunctionalSpec, MeasureEval, PathEval, Polynomial, RunningIntegral,
                               constant_functional, corpus_functional, derivcheck, identity, single, summarize)
from pathfield.ito import ito_decomposition, partial_ito_decomposition
from pathfield.master import (MasterProblem, check_flow, closed_form_library, compare_fields, decoupling_field,
                              derivative_fields, fd_path_derivative, mollify_sweep, pde_residual, sobolev_eval,
                              sweep_monotone)
from pathfield.master.field import fd_measure_derivative
from pathfield.pathspace import DiscretePath, ParticleMeasure, TimeGrid
from conftest import bm_measure

pytestmark = pytest.mark.slow

T = 1.0
G = TimeGrid(T, 100)
N = 10_000
GAMMA = DiscretePath(G, np.linspace(0.0, 0.7, G.M + 1))
MU = bm_measure(G, 20, 0)
X_T = single(PathEval(identity()))
STD = DiffusionCoeffs.standard()


def note(request, text):
    request.node.user_properties.append(("note", text))


def crit(n, title):
    return pytest.mark.criterion(n, title)


# 1 ------------------------------------------------------------------------------

@crit(1, "derivative oracles: FD vs analytic over 100 probes")
def test_derivative_oracles(request):
    rows = derivcheck(CORPUS, probes=100, M=100, T=T, seed=1)
    s = summarize(rows)
    worst = max(v["worst_ratio"] for v in s.values())
    note(request, f"{len(rows)} comparisons, worst err/tol {worst:.3g}")
    bad = [k for k, v in s.items() if not v["passed"]]
    assert not bad, bad


# 2, 3 -----------------------------------------------------------------------------

@crit(2, "linear mean-field BSDE vs exp(1.5)")
def test_linear_mean_field(request):
    sol = solve_linear_mf_bsde(LinearMfBsde(xi=1.0, alpha=0.5, g=1.0, tol=1e-6), G, N, 7)
    rel = abs(sol.value / np.exp(1.5) - 1)
    note(request, f"Y0={sol.value:.6f} rel={rel:.2e} iters={sol.iterations}")
    assert rel <= 0.01
    assert is_geometric(sol.gaps, 3)


@crit(3, "nonlinear mean-field BSDE vs e")
def test_nonlinear_mean_field(request):
    p = BsdeProblem(constant_functional(1.0), G, SeparableGenerator(c_nu=1.0, stat="mean"), N=N, seed=7,
                    law_tol=1e-6, max_iter=10)
    sol = solve_mf_bsde(p, ParticleMeasure(G, np.zeros((1, G.M + 1, 1))), 0.0)
    rel = abs(sol.value / np.e - 1)
    note(request, f"Y0={sol.value:.6f} rel={rel:.2e} iters={sol.iterations}")
    assert rel <= 0.01 and sol.iterations <= 10


# 4 ------------------------------------------------------------------------------

def _problem(phi_a, seed=3):
    gen = SeparableGenerator(phi=Affine([phi_a])) if phi_a else SeparableGenerator()
    return MasterProblem(BsdeProblem(X_T, G, gen, N=N, seed=seed))


@crit(4, "decoupling field, trivial and linear cases")
@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75])
def test_decoupling_trivial(request, t):
    u = decoupling_field(_problem(0.0), t, GAMMA, MU)
    g = GAMMA.values[G.index(t), 0]
    assert abs(u.value - g) <= 3 * u.stderr + 1e-12


@crit(4, "decoupling field, trivial and linear cases")
@pytest.mark.parametrize("t", [0.0, 0.25, 0.5, 0.75])
def test_decoupling_linear(request, t):
    u = decoupling_field(_problem(1.0), t, GAMMA, MU)
    exact = np.exp(T - t) * GAMMA.values[G.index(t), 0]
    if exact == 0.0:
        assert abs(u.value) <= 3 * u.stderr + 1e-12
    else:
        rel = abs(u.value / exact - 1)
        note(request, f"f=y t={t} rel={rel:.1e}")
        assert rel <= 0.01


# 5 ------------------------------------------------------------------------------

SQUARE = single(PathEval(Polynomial([(1.0, [2])])))


def _ito(f, M, partial=False, seed=19):
    g = TimeGrid(T, M)
    gamma = DiscretePath.constant(g, 0.0)
    eta = ParticleMeasure(g, np.zeros((1, M + 1, 1)))
    if partial:
        return partial_ito_decomposition(f, STD, T, 0.0, 0.8, gamma, eta, N, seed)
    return ito_decomposition(f, STD, 0.0, T, gamma, eta, N, seed)


def _bands(request, label, f, partial=False):
    reps = {M: _ito(f, M, partial) for M in (50, 100, 200)}
    r = reps[100]
    ratio = reps[50].residual_stderr / reps[200].residual_stderr
    note(request, f"{label}: resid={r.residual_mean:.2e} se={r.residual_stderr:.2e} se50/se200={ratio:.2f}")
    assert abs(r.residual_mean) <= 3 * r.residual_stderr
    assert 2 * 0.7 <= ratio <= 2 * 1.3


@crit(5, "Ito-Dupire and partial residual bands")
def test_ito_square(request):
    _bands(request, "square", SQUARE)


@crit(5, "Ito-Dupire and partial residual bands")
def test_ito_composite(request):
    _bands(request, "composite", corpus_functional("composite", np.random.default_rng(23)))


@crit(5, "Ito-Dupire and partial residual bands")
def test_partial_composite(request):
    _bands(request, "partial composite", corpus_functional("composite", np.random.default_rng(23)), partial=True)


@crit(5, "Ito-Dupire and partial residual bands")
def test_partial_running_integral(request):
    # summation by parts makes the discrete identity exact: no noise to halve
    rep = _ito(single(RunningIntegral(Affine([1.0]))), 100, partial=True)
    note(request, f"partial running integral: max |resid| {np.max(np.abs(rep.samples['residual'])):.1e}")
    assert np.max(np.abs(rep.samples["residual"])) < 1e-12


# 6 ------------------------------------------------------------------------------

OMEGA_ID = DiscretePath.from_function(G, lambda s: np.array([s]))
EPS = [0.2, 0.1, 0.05, 0.025]
TS = [0.0, 0.25, 0.75, 1.0]


@crit(6, "mollification: Sobolev vs closed form, monotone eps sweep")
@pytest.mark.parametrize("case", ["delay-path", "delay-measure"])
def test_mollification(request, case):
    # 50 shifted copies of the ramp omega(s) = s
    offsets = np.random.default_rng(1).normal(0.0, 0.5, 50)
    mu = ParticleMeasure(G, offsets[:, None, None] + G.nodes[None, :, None]) if case == "delay-measure" else None
    cf = closed_form_library(case, eps=0.1)
    for t in TS:
        est = sobolev_eval(cf.terminal, None, t, OMEGA_ID, mu, N, 11)
        assert abs(est.value - cf.value(t, OMEGA_ID, mu)) <= 3 * est.stderr + 1e-12
    rows = mollify_sweep(case, EPS, TS, G, OMEGA_ID, mu, N, 11)
    note(request, f"{case}: max err vs limit {max(r['abs_err'] for r in rows):.2e}")
    assert sweep_monotone(rows)


# 7 ------------------------------------------------------------------------------

@crit(7, "master-equation residuals")
def test_residual_delay_mixed(request):
    cf = closed_form_library("delay-mixed")
    mp = cf.master_problem(G, N=N, seed=5)
    mu = bm_measure(G, 50, 2)
    worst = 0.0
    for t in (0.1, 0.2, 0.45, 0.8, 0.9):
        r = pde_residual(mp, cf, t, OMEGA_ID, mu, seed=5)
        worst = max(worst, abs(r.residual) / r.budget)
        assert r.ok, (t, r)
    note(request, f"worst |r|/budget {worst:.2g}")


@crit(7, "master-equation residuals")
def test_residual_heat_analytic():
    h = closed_form_library("heat_quadratic")
    for t in (0.1, 0.5, 0.9):
        assert pde_residual(h.master_problem(G, N=100), h, t, OMEGA_ID, mode="analytic").residual == 0.0


# 8 ------------------------------------------------------------------------------

@crit(8, "flow property")
@pytest.mark.parametrize("phi_a", [0.0, 1.0])
def test_flow(request, phi_a):
    mp = _problem(phi_a, seed=17)
    base = decoupling_field(mp, 0.0, GAMMA, MU)
    worst = 0.0
    for s in (0.25, 0.5, 0.75):
        r = check_flow(mp, 0.0, s, GAMMA, MU, 10, base)
        worst = max(worst, abs(r.mean_discrepancy) / max(r.stderr, 1e-300))
        assert r.ok, (s, r.mean_discrepancy, r.stderr)
    note(request, f"f={'y' if phi_a else '0'}: worst |disc|/se {worst:.2g}")


# 9 ------------------------------------------------------------------------------

@crit(9, "comparison margins")
def test_compare_constants(request):
    b0 = BsdeProblem(X_T, G, SeparableGenerator(), N=N, seed=13)
    b1 = BsdeProblem(X_T, G, SeparableGenerator(const=1.0), N=N, seed=13)
    for t in (0.0, 0.5):
        r = compare_fields(MasterProblem(b0), MasterProblem(b1), t, GAMMA)
        assert abs(r.margin - (T - t)) <= 1e-10 and r.ordered


@crit(9, "comparison margins")
def test_compare_linear(request):
    zero = constant_functional(0.0)
    b0 = BsdeProblem(zero, G, SeparableGenerator(phi=Affine([1.0])), N=N, seed=13)
    b1 = BsdeProblem(zero, G, SeparableGenerator(phi=Affine([1.0]), const=1.0), N=N, seed=13)
    t = 0.3
    r = compare_fields(MasterProblem(b0), MasterProblem(b1), t, GAMMA)
    rel = abs(r.margin / (np.exp(T - t) - 1) - 1)
    note(request, f"linear margin rel err {rel:.1e}")
    assert rel <= 0.01 and r.ordered


# 10 -----------------------------------------------------------------------------

@crit(10, "structural invariants")
def test_non_anticipativity():
    rng = np.random.default_rng(5)
    P = np.cumsum(rng.normal(0, 0.1, (1, G.M + 1, 1)), axis=1)
    Q = np.cumsum(rng.normal(0, 0.1, (10, G.M + 1, 1)), axis=1)
    for name in CORPUS:
        f = corpus_functional(name, np.random.default_rng(1))
        for k in (0, 37, 99):
            P2, Q2 = P.copy(), Q.copy()
            P2[:, k + 1:] += rng.normal(size=P2[:, k + 1:].shape)
            Q2[:, k + 1:] += rng.normal(size=Q2[:, k + 1:].shape)
            t = G.time(k)
            assert np.array_equal(f.value(G, t, P, Q), f.value(G, t, P2, Q2)), (name, k)


@crit(10, "structural invariants")
def test_law_invariance():
    Phi = FunctionalSpec(Affine([1.0, 1.0]), [PathEval(identity()), MeasureEval(Polynomial([(1.0, [2])]))])
    p = BsdeProblem(Phi, G, SeparableGenerator(c_nu=0.5), N=2000, seed=5)
    a = solve_mf_bsde(p, MU, 0.3)
    b = solve_mf_bsde(p, MU.permuted(np.random.default_rng(0).permutation(MU.N)), 0.3)
    assert b.value == pytest.approx(a.value, rel=1e-9)


@crit(10, "structural invariants")
def test_terminal_exactness():
    p = BsdeProblem(SQUARE, G, SeparableGenerator(phi=Affine([0.5])), N=2000, seed=5)
    sol = solve_bsde_regression(p, GAMMA, 0.4)
    assert np.array_equal(sol.Y[:, G.M], SQUARE.value(G, T, sol.ensemble.paths, None))


@crit(10, "structural invariants")
@pytest.mark.parametrize("command", ["derivcheck", "solve-bsde", "ito-check"])
def test_determinism_across_threads(tmp_path, command):
    cfg = {"grid": {"M": 40}, "mc": {"N": 2000, "seed": 31},
           "problem": {"terminal": {"name": "omega(T)"}, "generator": {"phi": {"kind": "affine", "a": 1.0}}},
           "point": {"t": [0.2], "gamma": {"kind": "linear", "start": 0.0, "end": 0.7}},
           "derivcheck": {"probes": 5}, "ito": {"functional": {"name": "composite"}, "t": 0.0}}
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg))
    outs = []
    for k in ("1", "8"):
        d = tmp_path / k
        main([command, "--config", str(path), "--out", str(d), "--threads", k])
        outs.append({p.name: p.read_bytes() for p in d.glob("*.csv")})
    assert outs[0] and outs[0] == outs[1]


# 11 -----------------------------------------------------------------------------

MEAN_PHI = FunctionalSpec(Affine([1.0, 1.0]), [PathEval(identity()), MeasureEval(identity())])


@crit(11, "variation fields vs bump-and-resolve FD")
@pytest.mark.parametrize("terminal", ["omega(T)", "omega(T)+mean(T)"])
@pytest.mark.parametrize("phi_a", [0.0, 1.0])
def test_variation_fields(request, terminal, phi_a):
    Phi = X_T if terminal == "omega(T)" else MEAN_PHI
    gen = SeparableGenerator(phi=Affine([phi_a])) if phi_a else SeparableGenerator()
    mp = MasterProblem(BsdeProblem(Phi, G, gen, N=N, seed=3))
    t, tau, i = 0.5, 0.3, 2
    d = derivative_fields(mp, t, tau, GAMMA, MU, x_tilde=i)
    v, se = d.derivatives["d_omega_tau"]
    fd, fd_se = fd_path_derivative(mp, t, tau, GAMMA, MU)
    assert abs(v - fd) <= max(3 * np.hypot(se, fd_se), 1e-2)
    m, mse = d.derivatives["d_mu"]
    fdm, fdm_se = fd_measure_derivative(mp, t, tau, GAMMA, MU, i)
    assert abs(m - fdm) <= max(3 * np.hypot(mse, fdm_se), 1e-2)
    note(request, f"{terminal}, f={'y' if phi_a else '0'}: path {v:.4f}/{fd:.4f} measure {m:.4f}/{fdm:.4f}")
