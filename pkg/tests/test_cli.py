import json
import subprocess
import sys

import pytest
import yaml

from pathfield.cli import main

SMALL_BSDE = {
    "grid": {"T": 1.0, "M": 20},
    "mc": {"N": 500, "seed": 7},
    "problem": {"terminal": {"name": "omega(T)"}, "generator": {"phi": {"kind": "affine", "a": 1.0}}},
    "point": {"t": [0.5], "gamma": {"kind": "linear", "start": 0.0, "end": 0.7}},
}


def write(tmp_path, data, name="run.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix == ".csv"}


def test_derivcheck_small(tmp_path, capsys):
    cfg = write(tmp_path, {"grid": {"M": 20}, "mc": {"seed": 1}, "derivcheck": {"probes": 3}})
    assert main(["derivcheck", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    lines = (tmp_path / "o" / "derivcheck.csv").read_text().splitlines()
    assert lines[0].startswith("functional,")
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["mc"]["seed"] == 1 and man["error"] is None
    assert "derivcheck.csv" in man["files"]


@pytest.mark.parametrize("command", ["derivcheck", "solve-bsde"])
def test_rerun_is_byte_identical_across_threads(tmp_path, command):
    data = dict(SMALL_BSDE, derivcheck={"probes": 2})
    cfg = write(tmp_path, data)
    assert main([command, "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "1"]) in (0, 1)
    assert main([command, "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "8"]) in (0, 1)
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a and a == b


def test_seed_flag_changes_output(tmp_path):
    cfg = write(tmp_path, SMALL_BSDE)
    main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "8"])
    assert files(tmp_path / "a") != files(tmp_path / "b")


def test_missing_seed(tmp_path, capsys):
    cfg = write(tmp_path, {"grid": {"M": 10}})
    assert main(["derivcheck", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "mc.seed" in capsys.readouterr().err


@pytest.mark.parametrize("data,path", [
    ({"grid": {"M": 0}, "mc": {"seed": 1}}, "grid.M"),
    ({"mc": {"seed": 1, "extra": 3}}, "mc.extra"),
    ({"mc": {"seed": 1}, "problem": {"terminal": {"leaves": [{"kind": "path-eval", "map": {"kind": "nope"}}]}}},
     "problem.terminal.leaves[0].map.kind"),
])
def test_config_error_paths(tmp_path, capsys, data, path):
    cfg = write(tmp_path, data)
    assert main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert path in capsys.readouterr().err


def test_missing_file(tmp_path, capsys):
    assert main(["derivcheck", "--config", str(tmp_path / "none.yaml")]) == 2


def test_budget_refusal(tmp_path, capsys):
    data = {"mc": {"seed": 1}, "sweep": {"M": [10, 20], "N": [100, 200], "budget": 3}}
    cfg = write(tmp_path, data)
    assert main(["convergence", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "sweep" in capsys.readouterr().err


def test_solver_failure_exit_3(tmp_path, capsys):
    data = {"grid": {"M": 20}, "mc": {"N": 200, "seed": 7}, "picard": {"tol": 1e-30, "max_iter": 3},
            "linear_mf": {"alpha": 0.5, "g": 1.0, "xi": 1.0}, "point": {"t": [0.0]}}
    cfg = write(tmp_path, data)
    assert main(["solve-bsde", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "solver failure" in capsys.readouterr().err
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["error"]["kind"] == "convergence" and len(man["error"]["gaps"]) == 3


def test_expectation_failure_exit_1(tmp_path):
    data = dict(SMALL_BSDE, expect={"values": [100.0], "rel_tol": 0.01})
    cfg = write(tmp_path, data)
    assert main(["master-eval", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PATHFIELD_OUT", str(tmp_path / "env"))
    cfg = write(tmp_path, SMALL_BSDE)
    assert main(["solve-bsde", "--config", cfg]) in (0, 1)
    assert (tmp_path / "env" / "manifest.json").exists()
    # the config key wins over the environment
    cfg = write(tmp_path, dict(SMALL_BSDE, out=str(tmp_path / "cfg")))
    main(["solve-bsde", "--config", cfg])
    assert (tmp_path / "cfg" / "manifest.json").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pathfield", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()


def test_ramp_measure_config():
    from pathfield.config import build_measure, parse_config
    from pathfield.pathspace import TimeGrid
    cfg = parse_config({"mc": {"seed": 3}, "point": {"mu": {"kind": "ramp", "particles": 5, "slope": 2.0}}})
    mu = build_measure(cfg.point.mu, TimeGrid(1.0, 10), cfg.seed)
    steps = mu.values[:, 1:, 0] - mu.values[:, :-1, 0]
    assert mu.N == 5 and steps == pytest.approx(0.2)
