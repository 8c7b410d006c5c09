"""
Worker pool helpers
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import psutil

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_jobs() -> int:
    """Physical core count, falling back to the logical count"""
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count(logical=True) or 1
    return max(1, int(cores))


def resolve_jobs(jobs: Optional[int]) -> int:
    if jobs is None or jobs <= 0:
        return default_jobs()
    return jobs


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: Optional[int] = None) -> List[R]:
    """Apply fn to every item, returning results in input order

    Args:
        fn: Pure function of one item
        items: Work items
        jobs: Worker count; 1 runs inline, None or 0 uses default_jobs()

    Returns:
        Results in the same order as items, regardless of completion order
    """
    work = list(items)
    workers = min(resolve_jobs(jobs), max(1, len(work)))
    if workers == 1:
        return [fn(item) for item in work]
    logger.debug("parallel_map: %d items on %d workers", len(work), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, work))
