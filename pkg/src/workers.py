"""
ScaForge Worker Pool
~~~~~~~~~~~~~~~~~~~~
Parallelism helpers. The thread count comes from SCAFORGE_THREADS
(0 or unset means one thread per logical CPU, as reported by psutil).
Every parallel map returns results in input order, so reductions done by
the caller are independent of scheduling.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Mapping, Optional, TypeVar

import psutil

from .errors import UsageError

logger = logging.getLogger(__name__)

THREADS_ENV = "SCAFORGE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(env: Optional[Mapping[str, str]] = None) -> int:
    """Number of worker threads to use (always >= 1)."""
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV, "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if requested < 0:
        raise UsageError(f"{THREADS_ENV} must be >= 0, got {requested}")
    if requested == 0:
        return max(1, psutil.cpu_count(logical=True) or 1)
    return requested


def ordered_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    threads: Optional[int] = None,
) -> list[R]:
    """
    Apply fn to every item, possibly on several threads.

    Results come back in the order of `items`; numpy kernels release the GIL
    so per-item work overlaps.
    """
    items = list(items)
    n_threads = resolve_threads() if threads is None else max(1, threads)
    if n_threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]

    logger.debug("ordered_map: %d items on %d threads", len(items), n_threads)
    with ThreadPoolExecutor(
        max_workers=min(n_threads, len(items)),
        thread_name_prefix="ScaForge-Worker",
    ) as pool:
        return list(pool.map(fn, items))


def get_system_info() -> dict:
    """CPU and memory facts reported alongside benchmarks."""
    mem = psutil.virtual_memory()
    proc = psutil.Process()
    return {
        "cpu_count": psutil.cpu_count(),
        "threads": resolve_threads(),
        "total_ram_gb": round(mem.total / (1024 ** 3), 2),
        "rss_mb": round(proc.memory_info().rss / (1024 * 1024), 2),
    }
