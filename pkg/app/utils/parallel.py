from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from app.core.settings import settings

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """
    Map *fn* over *items*, returning results in input order.
    Runs inline when a single worker is configured.
    """
    work = list(items)
    n = int(threads if threads is not None else settings.MACPOWER_THREADS)
    if n <= 1 or len(work) <= 1:
        return [fn(x) for x in work]
    with ThreadPoolExecutor(max_workers=min(n, len(work))) as pool:
        return list(pool.map(fn, work))
