"""Optional numba acceleration.

Hot loops are written once as plain Python over scalars and compiled with
``numba.njit`` when numba is importable. Setting ``ALLPHOTONS_DISABLE_NUMBA=1``
forces every caller onto its pure-numpy code path instead.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FLAG = "ALLPHOTONS_DISABLE_NUMBA"


def numba_enabled():
    """True when compiled kernels should be used."""
    if numba is None:
        return False
    return os.environ.get(_FLAG, "0").strip().lower() not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` if available, otherwise the identity decorator."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
