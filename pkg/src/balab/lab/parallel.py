"""Order-preserving parallel map capped by ``BA_LAB_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from ..errors import ArgumentError

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "BA_LAB_THREADS"


def thread_count(threads: int | None = None) -> int:
    """Explicit value, else ``BA_LAB_THREADS``; 0 or unset means one per CPU."""
    if threads is None:
        raw = os.environ.get(ENV_VAR, "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise ArgumentError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if threads < 0:
        raise ArgumentError(f"thread count must be >= 0, got {threads}")
    return threads or (os.cpu_count() or 1)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    items = list(items)
    workers = min(thread_count(threads), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
