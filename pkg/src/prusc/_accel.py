"""Numba switch.

Set ``PRUSC_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
implementation. The flag is read once at import time.
"""
import os

_flag = os.environ.get("PRUSC_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
