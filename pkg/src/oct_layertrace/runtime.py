"""Thread-count control shared by the numeric kernels."""

import contextlib
import os

from threadpoolctl import threadpool_limits

ENV_THREADS = "OCT_LAYERTRACE_THREADS"

_state = {"threads": None}


def fft_workers() -> int:
    """Worker count handed to ``scipy.fft`` (1 in deterministic mode)."""
    return _state["threads"] or 1


def resolve_threads(threads=None, deterministic=False):
    if deterministic:
        return 1
    if threads is None:
        env = os.environ.get(ENV_THREADS)
        threads = int(env) if env else None
    if threads is not None and threads < 1:
        raise ValueError("thread count must be >= 1")
    return threads


@contextlib.contextmanager
def thread_limit(threads=None, deterministic=False):
    """Cap BLAS and FFT parallelism for the duration of the block."""
    n = resolve_threads(threads, deterministic)
    prev = _state["threads"]
    _state["threads"] = n
    try:
        if n is None:
            yield n
        else:
            with threadpool_limits(limits=n):
                yield n
    finally:
        _state["threads"] = prev
