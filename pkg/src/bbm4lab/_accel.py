"""Optional numba acceleration.

Set ``BBM4LAB_NO_NUMBA=1`` to run every kernel as plain Python/numpy. The
kernels are written in the numba-compatible subset so both paths execute the
same source.
"""

import os

DISABLED = os.environ.get("BBM4LAB_NO_NUMBA", "").strip() not in ("", "0", "false", "False")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    _njit = None
    HAVE_NUMBA = False

JIT_OPTIONS = {"cache": True, "nogil": True}


def njit(fn=None, **kwargs):
    """``numba.njit`` when enabled, identity otherwise."""
    opts = {**JIT_OPTIONS, **kwargs}

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return _njit(**opts)(f)

    return wrap(fn) if fn is not None else wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
