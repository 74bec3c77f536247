"""Numba acceleration plumbing.

Hot kernels in this package ship two builds: a numba ``@njit`` version and a
pure-numpy fallback.  Which one runs is decided per call by :func:`use_numba`,
controlled through the ``ADJ_SAMPLER_NUMBA`` environment variable:

    unset      use numba when it imports cleanly (default)
    0/off      force the numpy path
    1/on       require numba, fail loudly if missing

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

# the default TBB probe is noisy on some images; workqueue is always present
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")


def _keep_large_allocations_on_heap() -> None:
    """Stop glibc from mmap-ing / trimming MB-scale buffers.

    The numeric code cycles many megabyte-sized temporaries; with the default
    thresholds every cycle pays mmap/munmap page faults, which are extremely
    expensive on virtualized hosts.  Raising both thresholds keeps freed
    blocks on the heap for immediate reuse (measured ~9x on the hot loops).
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:  # pragma: no cover - non-glibc platforms
        pass


_keep_large_allocations_on_heap()


def _limit_blas_threads() -> None:
    """Pin BLAS pools to one thread unless explicitly overridden.

    Every matrix product in this package is small (hundreds of rows); the
    threaded BLAS pools spin-wait between those calls and fight the numba
    worker threads for cores, which measured ~6x slower on the training hot
    loop.  ``ADJ_SAMPLER_BLAS_THREADS`` restores multithreaded BLAS.
    """
    want = os.environ.get("ADJ_SAMPLER_BLAS_THREADS", "1")
    try:
        n = max(1, int(want))
    except ValueError:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n, user_api="blas")
    except Exception:  # pragma: no cover - best effort
        pass


_limit_blas_threads()

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag in benchmarks
    HAS_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def _initial_flag() -> bool:
    raw = os.environ.get("ADJ_SAMPLER_NUMBA", "").strip().lower()
    if raw in ("0", "off", "false", "no"):
        return False
    if raw in ("1", "on", "true", "yes"):
        if not HAS_NUMBA:
            raise ImportError("ADJ_SAMPLER_NUMBA requires numba but it failed to import")
        return True
    return HAS_NUMBA


_USE_NUMBA = _initial_flag()


def use_numba() -> bool:
    """Whether dispatchers should pick the numba build of a kernel."""
    return _USE_NUMBA


def set_use_numba(enabled: bool) -> None:
    """Override kernel selection at runtime (used by tests and benchmarks)."""
    global _USE_NUMBA
    if enabled and not HAS_NUMBA:
        raise ImportError("numba is not available")
    _USE_NUMBA = bool(enabled)
