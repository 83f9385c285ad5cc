"""Thread-based worker pools and reproducible reductions.

numpy and scipy release the GIL inside their compiled kernels, so a thread pool
gives real concurrency for the matrix-vector products and neighbour queries
that dominate the runtime. Two separate executors are kept: one for
coarse-grained tasks (levels, blocks, row batches) and one for the row chunks
of a single sparse product. Coarse tasks may submit row chunks; row chunks never
submit anything, so waiting on the inner pool cannot deadlock.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def resolve_workers(workers) -> int:
    """Turn ``"auto"``/``None``/int into a positive worker count."""
    if workers is None or workers == "auto":
        return max(1, os.cpu_count() or 1)
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def dot(x: np.ndarray, y: np.ndarray, deterministic: bool = True) -> float:
    """Inner product.

    In deterministic mode the sum is numpy's fixed-order pairwise reduction of
    the elementwise product, which does not depend on BLAS threading.
    """
    if deterministic:
        return float(np.add.reduce(x * y))
    return float(np.dot(x, y))


def column_dots(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Column-wise inner products of two ``(n, m)`` arrays."""
    return np.einsum("ij,ij->j", X, Y) if X.ndim == 2 else np.array([dot(X, Y)])


class WorkerPool:
    """Pair of thread pools sized by ``workers``; inline execution when 1."""

    def __init__(self, workers=1, deterministic: bool = True):
        self.workers = resolve_workers(workers)
        self.deterministic = deterministic
        self._outer = None
        self._inner = None
        if self.workers > 1:
            self._outer = ThreadPoolExecutor(self.workers, thread_name_prefix="msk-task")
            self._inner = ThreadPoolExecutor(self.workers, thread_name_prefix="msk-rows")

    def map(self, fn, items) -> list:
        items = list(items)
        if self._outer is None or len(items) <= 1:
            return [fn(item) for item in items]
        return list(self._outer.map(fn, items))

    def map_rows(self, fn, items) -> list:
        items = list(items)
        if self._inner is None or len(items) <= 1:
            return [fn(item) for item in items]
        return list(self._inner.map(fn, items))

    def close(self) -> None:
        for ex in (self._outer, self._inner):
            if ex is not None:
                ex.shutdown(wait=True)
        self._outer = self._inner = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def __repr__(self) -> str:
        return f"WorkerPool(workers={self.workers}, deterministic={self.deterministic})"


SERIAL = WorkerPool(1)


def as_pool(pool) -> WorkerPool:
    """``None`` means serial execution."""
    if pool is None:
        return SERIAL
    if not isinstance(pool, WorkerPool):
        raise TypeError(f"expected WorkerPool or None, got {type(pool).__name__}")
    return pool


def row_chunks(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n else 1
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a] or [(0, n)]
