"""Worker-count setting shared by the chunked kernels."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_workers = os.cpu_count() or 1


def get_workers() -> int:
    return _workers


def set_workers(n: int | None) -> None:
    global _workers
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    _workers = int(n)


def ordered_map(fn, items):
    """``list(map(fn, items))``, run on the configured number of threads.

    Result order always follows ``items`` so reductions stay serial-ordered.
    """
    items = list(items)
    if _workers == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=_workers) as pool:
        return list(pool.map(fn, items))
