"""Deterministic worker pool.

Work is cut into fixed-size chunks that do not depend on the thread count, and
results are assembled in chunk order, so ``threads=1`` and ``threads=N`` give
bit-identical output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_THREADS = 1


def set_threads(n):
    global _THREADS
    _THREADS = max(1, int(n))


def get_threads():
    return _THREADS


def chunk_slices(n, chunk):
    return [slice(i, min(n, i + chunk)) for i in range(0, n, chunk)]


def map_ordered(fn, items, threads=None):
    items = list(items)
    threads = get_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def map_chunks(fn, n, chunk, threads=None):
    """fn(slice) for fixed chunks of range(n), results in index order."""
    return map_ordered(fn, chunk_slices(n, chunk), threads)


def spawn_seeds(master, n):
    """Per-task generators: task i uses SeedSequence(entropy=master, spawn_key=(i,))."""
    return [np.random.default_rng(np.random.SeedSequence(entropy=int(master), spawn_key=(i,)))
            for i in range(n)]
