"""Batch experiment runner.

    pathfield SUBCOMMAND [--config FILE] [--out DIR] [--seed U64] [--threads K]

Each run writes long-format CSVs plus manifest.json into the output
directory (--out, else the config's out key, else $PATHFIELD_OUT, else
./pathfield-out).  Exit status: 0 all suites passed, 1 some suite failed,
2 bad configuration, 3 a solver did not converge.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, ConvergenceError
from .parallel import threads
from .pathspace import DomainError

log = logging.getLogger("pathfield")

SUBCOMMANDS = ("derivcheck", "ito-check", "solve-bsde", "master-eval", "mollify-sweep",
               "convergence", "compare", "flow-check")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return "" if x is None else str(x)


def write_csv(path: Path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> Path:
    """Header row plus one line per row, floats at 17 significant digits."""
    cols = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in cols])
    return path


def cell_seed(seed: int, *key: int) -> int:
    """Seed of one sweep cell, fixed by the run seed and the cell's axis values."""
    return int(np.random.SeedSequence([seed, *[int(k) for k in key]]).generate_state(1, np.uint64)[0])


def fit_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


class Run:
    """Collects CSV files, suite verdicts and wall times for the manifest."""

    def __init__(self, cfg, command: str, out: Path):
        self.cfg, self.command, self.out = cfg, command, out
        self.files: list[str] = []
        self.suites: dict = {}
        self.walls: dict = {}

    def csv(self, name, rows, columns=None):
        write_csv(self.out / name, rows, columns)
        self.files.append(name)

    def suite(self, name, passed, **stats):
        self.suites[name] = {"passed": bool(passed), **{k: _jsonable(v) for k, v in stats.items()}}

    def timed(self, name, fn: Callable):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.walls[name] = time.perf_counter() - t0

    @property
    def passed(self):
        return all(s["passed"] for s in self.suites.values())

    def manifest(self, error: Optional[dict] = None) -> dict:
        return {"command": self.command, "version": __version__, "config": self.cfg.model_dump(mode="json"),
                "threads": self.cfg.mc.threads, "files": self.files, "suites": self.suites,
                "passed": self.passed and error is None, "wall_times": self.walls, "error": error}


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else str(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


# --- suites -----------------------------------------------------------------------

def _point(cfg, grid):
    from .config import build_measure, build_path
    return (build_path(cfg.point.gamma, grid, cfg.seed), build_measure(cfg.point.mu, grid, cfg.seed))


def _expect_check(cfg, i, value, stderr):
    """(expected, abs_err, passed) for the i-th point against the expect block."""
    ex = cfg.expect
    if i >= len(ex.values):
        return None, None, True
    ref = ex.values[i]
    err = abs(value - ref)
    if ex.rel_tol is not None:
        return ref, err, err <= ex.rel_tol * abs(ref) + 1e-12
    return ref, err, err <= ex.n_se * stderr + 1e-12 * (1 + abs(ref))


def run_derivcheck(run: Run):
    from .funcalc.corpus import derivcheck, summarize
    cfg = run.cfg
    d = cfg.derivcheck
    rows = run.timed("derivcheck", lambda: derivcheck(d.functionals, d.probes, cfg.grid.M, cfg.grid.T, cfg.seed,
                                                     d.particles, cfg.fd.build()))
    run.csv("derivcheck.csv", [r.as_dict() for r in rows])
    summary = summarize(rows)
    for key, s in summary.items():
        run.suite(f"derivcheck:{key}", s["passed"], worst_ratio=s["worst_ratio"], abs_err=s["abs_err"],
                  tol=s["tol"])


def _ito_one(cfg, grid, N, seed):
    from .config import build_coeffs, build_functional, build_measure, build_path
    from .ito import ito_decomposition, partial_ito_decomposition
    ic = cfg.ito
    f = build_functional(ic.functional, grid.T, cfg.seed, "ito.functional")
    gamma = build_path(cfg.point.gamma, grid, cfg.seed)
    eta = build_measure(cfg.point.mu, grid, cfg.seed)
    if eta is None:
        from .pathspace import ParticleMeasure
        eta = ParticleMeasure(grid, gamma.values[None])
    co = build_coeffs(cfg.problem.coeffs)
    s = grid.T if ic.s is None else ic.s
    if ic.v is None:
        return ito_decomposition(f, co, ic.t, s, gamma, eta, N, seed, ic.N_prime, cfg.fd.build())
    return partial_ito_decomposition(f, co, ic.v, ic.t, s, gamma, eta, N, seed, ic.N_prime, cfg.fd.build())


def run_ito(run: Run):
    from .config import build_grid
    cfg = run.cfg
    rows = []
    for M in cfg.sweep.M or [cfg.grid.M]:
        rep = run.timed(f"ito:M={M}", lambda: _ito_one(cfg, build_grid(cfg.grid, M), cfg.mc.N, cfg.seed))
        row = {k: v for k, v in rep.row().items() if k != "wall_time"}     # keep CSVs byte-stable
        rows.append({**row, "lhs_mean": rep.lhs_mean, "passed": rep.passes(3.0)})
        run.suite(f"ito:M={M}", rep.passes(3.0), residual=rep.residual_mean, stderr=rep.residual_stderr)
    run.csv("ito.csv", rows)


def _linear_mf(cfg, grid):
    from .bsde.solvers import LinearMfBsde, solve_linear_mf_bsde
    lm = cfg.linear_mf
    spec = LinearMfBsde(xi=lm.xi, alpha=lm.alpha, g=lm.g, h=lm.h, tol=cfg.picard.tol, max_iter=cfg.picard.max_iter)
    return solve_linear_mf_bsde(spec, grid, cfg.mc.N, cfg.seed)


def run_solve_bsde(run: Run):
    from .bsde.solvers import is_geometric, solve_bsde_regression, solve_mf_bsde
    from .config import build_grid, build_problem
    cfg = run.cfg
    grid = build_grid(cfg.grid)
    gamma, mu = _point(cfg, grid)
    t = cfg.point.t[0]
    if cfg.linear_mf is not None:
        sol = run.timed("solve", lambda: _linear_mf(cfg, grid))
    else:
        bsde = build_problem(cfg, grid).bsde
        if bsde.uses_measure or bsde.generator.uses_nu:
            if mu is None:
                raise ConfigError("point.mu", "the problem reads the measure argument; give point.mu")
            sol = run.timed("solve", lambda: solve_mf_bsde(bsde, mu, t))
        else:
            sol = run.timed("solve", lambda: solve_bsde_regression(bsde, gamma, t))
    ym, ys, za = sol.y_mean(), sol.y_stderr(), sol.z_abs_mean()
    run.csv("bsde_nodes.csv", [{"k": k, "t": grid.time(k), "y_mean": ym[k], "y_stderr": ys[k], "z_abs_mean": za[k]}
                               for k in range(sol.k0, grid.M + 1)])
    run.csv("bsde_gaps.csv", [{"iteration": i + 1, "gap": g} for i, g in enumerate(sol.gaps)])
    ref, err, ok = _expect_check(cfg, 0, sol.value, sol.stderr)
    run.suite("solve-bsde", ok, value=sol.value, stderr=sol.stderr, expected=ref, abs_err=err,
              iterations=sol.iterations, geometric=is_geometric(sol.gaps) if len(sol.gaps) > 1 else None)


def run_master(run: Run):
    from .config import build_coeffs, build_grid, build_problem
    from .master.closed_forms import CaseParams, KinkError, closed_form_library
    from .master.field import decoupling_field, derivative_fields
    from .master.residual import DecouplingProvider, pde_residual
    cfg = run.cfg
    mc = cfg.master
    grid = build_grid(cfg.grid)
    gamma, mu = _point(cfg, grid)
    if mc.closed_form is not None:
        cf = closed_form_library(mc.closed_form, CaseParams(T=grid.T, eps=mc.eps))
        problem = cf.master_problem(grid, cfg.mc.N, cfg.seed, build_coeffs(cfg.problem.coeffs))
        provider, field = cf, (lambda t: cf(t, gamma, mu))
    else:
        problem = build_problem(cfg, grid)
        provider, field = DecouplingProvider(problem), (lambda t: decoupling_field(problem, t, gamma, mu))
    rows = []
    for i, t in enumerate(cfg.point.t):
        est = run.timed(f"field:t={t}", lambda: field(t))
        ref, err, ok = _expect_check(cfg, i, est.value, est.stderr)
        row = {"t": t, "value": est.value, "stderr": est.stderr, "N": est.N, "M": grid.M, "expected": ref,
               "abs_err": err}
        if mc.derivatives and mc.closed_form is None and t < grid.T:
            xt = None if mu is None else mc.particle
            der = derivative_fields(problem, t, t, gamma, mu, x_tilde=xt, base=est)
            for name, (v, se) in der.derivatives.items():
                row[name], row[f"{name}_stderr"] = v, se
        if mc.residual and t < grid.T:
            try:
                rep = run.timed(f"residual:t={t}", lambda: pde_residual(problem, provider, t, gamma, mu,
                                                                         cfg.fd.build(), mc.residual_mode,
                                                                         seed=cfg.seed))
                row.update(residual=rep.residual, residual_stderr=rep.stderr, fd_error=rep.fd_error,
                           budget=rep.budget, residual_ok=rep.ok)
                ok = ok and rep.ok
            except KinkError as exc:
                row.update(residual=None, residual_ok=None, note=str(exc))
        row["passed"] = ok
        rows.append(row)
        run.suite(f"master-eval:t={t}", ok, value=est.value, stderr=est.stderr)
    cols = list(dict.fromkeys(c for r in rows for c in r))
    run.csv("master.csv", rows, cols)


def run_mollify(run: Run):
    from .config import build_grid
    from .master.closed_forms import CaseParams
    from .master.residual import SWEEP_COLUMNS, mollify_sweep, sweep_monotone
    cfg = run.cfg
    m = cfg.mollify
    grid = build_grid(cfg.grid)
    gamma, mu = _point(cfg, grid)
    if m.case != "delay-path" and mu is None:
        raise ConfigError("point.mu", f"case {m.case} reads the measure argument; give point.mu")
    params = CaseParams(T=grid.T, a=m.a, b=m.b, t0=m.t0, t1=m.t1, t2=m.t2, c=tuple(m.c))
    eps = cfg.sweep.eps or m.eps
    rows = run.timed("mollify-sweep", lambda: mollify_sweep(m.case, eps, m.t, grid, gamma, mu, cfg.mc.N, cfg.seed,
                                                            params))
    run.csv("mollify_sweep.csv", rows, SWEEP_COLUMNS)
    run.suite("mollify-sweep:monotone", sweep_monotone(rows), max_abs_err=max(r["abs_err"] for r in rows))
    agree = all(abs(r["estimate"] - r["analytic"]) <= 3 * r["stderr"] + 1e-12 * (1 + abs(r["analytic"]))
                for r in rows)
    run.suite("mollify-sweep:closed-form", agree)


def run_convergence(run: Run):
    from .bsde.solvers import solve_bsde_regression, solve_mf_bsde
    from .config import build_grid, build_problem
    cfg = run.cfg
    cv, sw = cfg.convergence, cfg.sweep
    Ms, Ns = sw.M or [cfg.grid.M], sw.N or [cfg.mc.N]
    cells = len(Ms) * len(Ns)
    if cells > sw.budget:
        raise ConfigError("sweep", f"{cells} cells exceed the cell budget {sw.budget}")
    if cells < 2:
        log.info("single-cell sweep; this is a plain run")
    rows = []
    for M, N in itertools.product(Ms, Ns):
        seed = cell_seed(cfg.seed, M, N)
        grid = build_grid(cfg.grid, M)
        if cv.target == "ito":
            rep = run.timed(f"cell:M={M},N={N}", lambda: _ito_one(cfg, grid, N, seed))
            row = {"M": M, "N": N, "seed": seed, "estimate": rep.residual_mean, "stderr": rep.residual_stderr,
                   "passed": rep.passes(3.0)}
        else:
            gamma, mu = _point(cfg, grid)
            bsde = build_problem(cfg, grid, N=N, seed=seed).bsde
            t = cfg.point.t[0]
            fn = (lambda: solve_mf_bsde(bsde, mu, t)) if (bsde.uses_measure or bsde.generator.uses_nu) \
                else (lambda: solve_bsde_regression(bsde, gamma, t))
            sol = run.timed(f"cell:M={M},N={N}", fn)
            ref, err, ok = _expect_check(cfg, 0, sol.value, sol.stderr)
            row = {"M": M, "N": N, "seed": seed, "estimate": sol.value, "stderr": sol.stderr, "expected": ref,
                   "abs_err": err, "passed": ok}
        rows.append(row)
    run.csv("convergence.csv", rows, list(dict.fromkeys(c for r in rows for c in r)))
    run.suite("convergence:cells", all(r["passed"] for r in rows), cells=cells)
    axis = Ms if cv.slope_axis == "M" else Ns
    if cv.slope_band is not None and len(set(axis)) >= 2:
        key = cv.slope_axis
        xs = sorted(set(axis))
        se = [np.mean([r["stderr"] for r in rows if r[key] == x]) for x in xs]
        slope = -fit_slope(xs, se)
        lo, hi = cv.slope_band
        run.suite(f"convergence:slope-{key}", lo <= slope <= hi, slope=slope, band=[lo, hi])


def run_compare(run: Run):
    from .config import build_grid, build_problem
    from .master.field import compare_fields
    cfg = run.cfg
    grid = build_grid(cfg.grid)
    gamma, mu = _point(cfg, grid)
    p1 = build_problem(cfg, grid)
    p2 = build_problem(cfg, grid, terminal=cfg.compare.terminal2, generator=cfg.compare.generator2)
    rows = []
    for i, t in enumerate(cfg.point.t):
        rep = run.timed(f"compare:t={t}", lambda: compare_fields(p1, p2, t, gamma, mu))
        ref, err, ok = _expect_check(cfg, i, rep.margin, rep.stderr)
        ok = ok and rep.ordered
        rows.append({"t": t, "u1": rep.u1, "u2": rep.u2, "margin": rep.margin, "stderr": rep.stderr,
                     "expected": ref, "abs_err": err, "ordered": rep.ordered, "passed": ok})
        run.suite(f"compare:t={t}", ok, margin=rep.margin, stderr=rep.stderr)
    run.csv("compare.csv", rows)


def run_flow(run: Run):
    from .config import build_grid, build_problem
    from .master.field import check_flow, decoupling_field
    cfg = run.cfg
    grid = build_grid(cfg.grid)
    gamma, mu = _point(cfg, grid)
    problem = build_problem(cfg, grid)
    t = cfg.point.t[0]
    base = run.timed("base", lambda: decoupling_field(problem, t, gamma, mu))
    rows = []
    for s in cfg.flow.s:
        rep = run.timed(f"flow:s={s}", lambda: check_flow(problem, t, s, gamma, mu, cfg.flow.n_paths, base))
        rows.append({"t": t, "s": s, "mean_discrepancy": rep.mean_discrepancy,
                     "max_abs_discrepancy": rep.max_abs_discrepancy, "stderr": rep.stderr, "passed": rep.ok})
        run.suite(f"flow:s={s}", rep.ok, mean_discrepancy=rep.mean_discrepancy, stderr=rep.stderr)
    run.csv("flow.csv", rows)


SUITES = {"derivcheck": run_derivcheck, "ito-check": run_ito, "solve-bsde": run_solve_bsde,
          "master-eval": run_master, "mollify-sweep": run_mollify, "convergence": run_convergence,
          "compare": run_compare, "flow-check": run_flow}


# --- entry point --------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathfield", description="Functional Ito calculus and master-equation checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=(SUITES[name].__doc__ or name).strip().splitlines()[0])
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--out", help="output directory (default: config out, $PATHFIELD_OUT, ./pathfield-out)")
        s.add_argument("--seed", type=_u64, help="run seed, overrides mc.seed")
        s.add_argument("--threads", type=_positive, help="thread budget, overrides mc.threads")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> tuple:
    from .config import load_config
    cfg = load_config(args.config)
    mc = cfg.mc.model_copy(update={k: v for k, v in (("seed", args.seed), ("threads", args.threads))
                                   if v is not None})
    cfg = cfg.model_copy(update={"mc": mc})
    cfg.seed                                    # mandatory
    out = args.out or cfg.out or os.environ.get("PATHFIELD_OUT") or "pathfield-out"
    cfg = cfg.model_copy(update={"out": str(out)})
    return cfg, Path(out)


def run(cfg, command: str, out: Path) -> tuple[int, dict]:
    """Execute one subcommand; returns (exit status, manifest)."""
    out.mkdir(parents=True, exist_ok=True)
    r = Run(cfg, command, out)
    error, status = None, EXIT_OK
    with threads(cfg.mc.threads):
        try:
            r.timed("total", lambda: SUITES[command](r))
        except ConvergenceError as exc:
            error, status = {"kind": "convergence", "message": str(exc), "gaps": [float(g) for g in exc.gaps]}, \
                EXIT_SOLVER
    if status == EXIT_OK and not r.passed:
        status = EXIT_FAIL
    manifest = r.manifest(error)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status, manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = resolve(args)
        status, manifest = run(cfg, args.command, out)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, s in manifest["suites"].items():
        print(f"{'PASS' if s['passed'] else 'FAIL'}  {name}")
    if manifest["error"]:
        print(f"solver failure: {manifest['error']['message']}", file=sys.stderr)
    print(f"wrote {', '.join(manifest['files'] + ['manifest.json'])} to {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
