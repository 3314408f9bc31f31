"""Numba on/off switch for the hot kernels.

Kernels in seqlab.kernels are written in nopython-compatible numpy and are
jitted when acceleration is enabled. Set SEQLAB_NUMBA=0 to run the exact same
functions as plain interpreted numpy (slower, identical results); set
SEQLAB_NUMBA=1 to require numba. The default ("auto") uses numba when it is
importable. benchmarks/bench_kernels.py compares the two paths.
"""

import os

_FLAG = os.environ.get("SEQLAB_NUMBA", "auto").strip().lower()

if _FLAG in ("0", "off", "false", "no"):
    NUMBA_ENABLED = False
elif _FLAG in ("1", "on", "true", "yes"):
    import numba  # noqa: F401  (fail loudly when explicitly requested)

    NUMBA_ENABLED = True
else:
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def maybe_jit(fn):
    """Apply numba.njit when acceleration is on, else return fn unchanged."""
    if NUMBA_ENABLED:
        from numba import njit

        return njit(cache=True)(fn)
    return fn
