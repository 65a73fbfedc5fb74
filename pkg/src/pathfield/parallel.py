"""Order-preserving thread map with a process-wide thread budget.

Work is always split into the same units whatever the budget, so results are
identical at any thread count.
"""
from __future__ import annotations

import contextlib
from concurrent.futures import ThreadPoolExecutor

_THREADS = 1


def get_threads() -> int:
    return _THREADS


def set_threads(k: int) -> None:
    global _THREADS
    if int(k) < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(k)


@contextlib.contextmanager
def threads(k: int):
    old = _THREADS
    set_threads(k)
    try:
        yield
    finally:
        set_threads(old)


def pmap(fn, items):
    items = list(items)
    if _THREADS == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_THREADS) as ex:
        return list(ex.map(fn, items))
