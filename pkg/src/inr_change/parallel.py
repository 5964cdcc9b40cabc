"""Row-blocked matrix products whose results do not depend on the worker count.

Multi-threaded BLAS splits products differently for each thread count. The last-bit
differences this causes grow by orders of magnitude per training epoch. Here BLAS is
pinned to one thread while a model is fitted or decoded. Parallelism comes from a pool
over fixed-size row blocks that are combined in a fixed order, so any worker count gives
bit-identical numbers.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from functools import reduce, wraps
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

BLOCK_ROWS = 4096

_lock = threading.Lock()
_workers = 1
_pool: ThreadPoolExecutor | None = None
_pin_depth = 0
_pin = None


def get_workers() -> int:
    return _workers


def set_workers(n: int) -> None:
    """Worker threads used for row blocks (1 runs blocks serially)."""
    global _workers, _pool
    n = int(n)
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    with _lock:
        if _pool is not None and n != _workers:
            _pool.shutdown(wait=True)
            _pool = None
        _workers = n


@contextmanager
def workers(n: int):
    prev = get_workers()
    set_workers(n)
    try:
        yield
    finally:
        set_workers(prev)


@contextmanager
def single_threaded_blas():
    """Limit BLAS to one thread; re-entrant and safe to nest across threads."""
    global _pin_depth, _pin
    with _lock:
        if _pin_depth == 0:
            _pin = threadpool_limits(limits=1)
        _pin_depth += 1
    try:
        yield
    finally:
        with _lock:
            _pin_depth -= 1
            if _pin_depth == 0:
                _pin.restore_original_limits()
                _pin = None


def _map(fn: Callable, items: list) -> list:
    global _pool
    if _workers == 1 or len(items) == 1:
        return [fn(x) for x in items]
    with _lock:
        if _pool is None:
            _pool = ThreadPoolExecutor(max_workers=_workers, thread_name_prefix="inr-block")
        pool = _pool
    return list(pool.map(fn, items))


def _blocks(n: int) -> list:
    return [slice(i, min(i + BLOCK_ROWS, n)) for i in range(0, n, BLOCK_ROWS)]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed over fixed blocks of the rows of ``a`` (axis -2)."""
    if a.ndim < 2 or a.shape[-2] <= BLOCK_ROWS:
        return a @ b
    parts = _map(lambda s: a[..., s, :] @ b, _blocks(a.shape[-2]))
    return np.concatenate(parts, axis=-2)


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a.T @ b`` for 2-D arrays, summing per-block products in block order."""
    if a.shape[0] <= BLOCK_ROWS:
        return a.T @ b
    parts = _map(lambda s: a[s].T @ b[s], _blocks(a.shape[0]))
    return reduce(np.add, parts)


def pinned(fn: Callable) -> Callable:
    """Run ``fn`` under :func:`single_threaded_blas`."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        with single_threaded_blas():
            return fn(*args, **kwargs)

    return wrapper
