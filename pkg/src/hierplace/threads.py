"""Thread-count control for BLAS so runs are reproducible at a fixed count."""
from __future__ import annotations

import contextlib

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # optional
    threadpool_limits = None


@contextlib.contextmanager
def limit_threads(n: int):
    if threadpool_limits is None or n is None or n < 1:
        yield
        return
    with threadpool_limits(limits=n):
        yield
