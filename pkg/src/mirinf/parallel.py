"""Order-preserving fan-out over a thread pool capped by ``MIRINF_THREADS``."""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(threads=None) -> int:
    if threads is None:
        threads = os.environ.get("MIRINF_THREADS", "1")
    try:
        return max(1, int(threads))
    except ValueError:
        return 1


def parallel_map(fn, items, threads=None) -> list:
    """``[fn(x) for x in items]``, possibly concurrent, results in input order."""
    items = list(items)
    n = worker_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
