import numpy as np
import pytest

from pathfield.pathspace import DiscretePath, ParticleMeasure, TimeGrid


@pytest.fixture
def grid4():
    return TimeGrid(1.0, 4)


@pytest.fixture
def ramp(grid4):
    return DiscretePath(grid4, [0, 1, 2, 3, 4])


def brownian(grid, n, seed, x0=0.0):
    rng = np.random.default_rng(seed)
    inc = rng.normal(0, np.sqrt(grid.dt), (n, grid.M, 1))
    return x0 + np.concatenate([np.zeros((n, 1, 1)), np.cumsum(inc, axis=1)], axis=1)


def bm_path(grid, seed, x0=0.0):
    return DiscretePath(grid, brownian(grid, 1, seed, x0)[0])


def bm_measure(grid, n, seed, x0=0.0):
    return ParticleMeasure(grid, brownian(grid, n, seed, x0))


_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _CRITERIA.get(n, (title, True, []))
    notes = prev[2] + [v for k, v in item.user_properties if k == "note"] if rep.when == "call" else prev[2]
    _CRITERIA[n] = (title, prev[1] and ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[n]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {title}"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
