"""Kernel backend selection.

``CLEEGN_BACKEND=numpy`` forces the pure-numpy kernels; anything else (or unset)
uses the numba kernels when numba imports cleanly.
"""
import os

_requested = os.environ.get("CLEEGN_BACKEND", "numba").strip().lower()

try:
    if _requested == "numpy":
        raise ImportError("numba disabled by CLEEGN_BACKEND")
    from numba import njit  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


BACKEND = "numba" if HAVE_NUMBA else "numpy"
