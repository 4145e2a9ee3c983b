"""Fixed chunking so that results never depend on the worker count."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

CHUNK = 128
_JOBS = int(os.environ.get("MIBKIT_JOBS", "1") or 1)


def set_jobs(n: int) -> None:
    global _JOBS
    if n < 1:
        raise ValueError("jobs must be at least 1")
    _JOBS = n


def get_jobs() -> int:
    return _JOBS


def chunks(n: int, size: int = CHUNK) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_chunks(fn: Callable[[slice], T], n: int, size: int = CHUNK, jobs: int | None = None) -> list[T]:
    """Apply ``fn`` to each fixed chunk; results come back in chunk order."""
    parts = chunks(n, size)
    jobs = jobs or _JOBS
    if jobs == 1 or len(parts) == 1:
        return [fn(s) for s in parts]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, parts))
