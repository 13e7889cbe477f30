"""Numba toggle.

Set ``GRIDSIGNAL_NO_NUMBA=1`` to run every kernel as plain Python over numpy
arrays.  The interpreted path is the reference; both must agree bit for bit.
"""

import os

_disabled = os.environ.get("GRIDSIGNAL_NO_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

HAS_NUMBA = False
if not _disabled:
    try:
        from numba import njit as _numba_njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover
        pass


def njit(*args, **kwargs):
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def py_func(kernel):
    """Uncompiled version of a kernel (itself when numba is off)."""
    return getattr(kernel, "py_func", kernel)
