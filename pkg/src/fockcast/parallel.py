"""Deterministic chunked execution helpers.

All data-parallel reductions in the package go through this module. The
chunk size is fixed (independent of the worker count) and partial results
are merged sequentially in chunk order, so outputs are bit-identical for
any thread count. BLAS pools are pinned separately via threadpoolctl so
library-level GEMM/eigh calls do not introduce their own nondeterminism.
"""

from concurrent.futures import ThreadPoolExecutor

import threadpoolctl

CHUNK_ROWS = 512

_threads = 1
_blas_limiter = None


def set_threads(n):
    """Set the worker count for chunked maps and pin BLAS to one thread."""
    global _threads, _blas_limiter
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n
    if _blas_limiter is None:
        _blas_limiter = threadpoolctl.threadpool_limits(limits=1)


def get_threads():
    return _threads


def chunk_slices(n_items, chunk=CHUNK_ROWS):
    return [slice(i, min(i + chunk, n_items)) for i in range(0, n_items, chunk)]


def run_chunked(fn, slices):
    """Apply fn to each slice, preserving slice order in the result list."""
    if _threads == 1 or len(slices) <= 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, slices))


def chunked_sum(fn, n_items, chunk=CHUNK_ROWS):
    """Sum fn(slice) over fixed-size chunks, merging in chunk order."""
    parts = run_chunked(fn, chunk_slices(n_items, chunk))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
