#!/usr/bin/env python3
"""
Parallel Execution Helpers
Shared thread pool for scan-, frame- and chunk-level parallelism
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar

import psutil
from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

_default_workers: Optional[int] = None


def set_default_workers(n: Optional[int]):
    """Cap every pool created afterwards (the CLI's --threads)"""
    global _default_workers
    if n is not None and n < 1:
        raise ValueError("worker count must be >= 1")
    _default_workers = n


def default_workers() -> int:
    return _default_workers or psutil.cpu_count(logical=True) or 1


def run_parallel(
    fn: Callable[[T], R],
    items: Iterable[T],
    max_workers: Optional[int] = None,
    description: Optional[str] = None,
) -> List[R]:
    """Apply fn to every item on a thread pool; results come back in input order"""
    items = list(items)
    workers = min(max_workers or default_workers(), max(len(items), 1))
    show_progress = description is not None and len(items) > 1

    if workers == 1:
        iterator = tqdm(items, desc=description, disable=not show_progress, leave=False)
        return [fn(item) for item in iterator]

    results: List[Optional[R]] = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}

        progress = tqdm(total=len(items), desc=description, disable=not show_progress, leave=False)
        try:
            for future in as_completed(future_to_index):
                results[future_to_index[future]] = future.result()
                progress.update(1)
        finally:
            progress.close()

    return results  # type: ignore[return-value]


def chunk_ranges(n: int, chunk_size: int) -> List[Sequence[int]]:
    """Split range(n) into contiguous [start, stop) pairs"""
    chunk_size = max(1, int(chunk_size))
    return [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]
