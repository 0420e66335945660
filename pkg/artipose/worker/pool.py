from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from artipose.config import settings

logger = logging.getLogger("artipose.worker.pool")

T = TypeVar("T")
R = TypeVar("R")


def resolve_jobs(jobs: int | None) -> int:
    jobs = settings.JOBS if jobs is None else jobs
    return max(1, int(jobs))


def map_ordered(fn: Callable[[T], R], items: Iterable[T], jobs: int | None = None) -> list[R]:
    """Apply fn to every item; results come back in input order whatever the worker count."""
    items = list(items)
    jobs = resolve_jobs(jobs)
    if jobs == 1 or len(items) <= 1:
        return [fn(item) for item in items]

    logger.debug("map_ordered fan-out items=%d jobs=%d", len(items), jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
