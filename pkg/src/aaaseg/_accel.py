"""Backend switch for the compiled kernels.

Set ``AAASEG_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
"""
import os

_disabled = os.environ.get("AAASEG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _disabled:
        raise ImportError("numba disabled by AAASEG_DISABLE_NUMBA")
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range


def backend_name():
    return "numba" if HAS_NUMBA else "numpy"


def set_num_threads(n):
    """Pin numba and BLAS thread pools to ``n`` threads."""
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if HAS_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=n)
