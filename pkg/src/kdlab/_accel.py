"""Numba switch.

Hot kernels are compiled with numba when it is importable and
``KDLAB_DISABLE_NUMBA`` is unset (or ``0``). Setting the variable to ``1``
forces the pure-numpy fallbacks, which is how the benchmark and the
equivalence tests compare both paths.
"""

import os

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    _HAVE_NUMBA = False


def _flag(name):
    return os.environ.get(name, "0").strip().lower() in ("1", "true", "yes", "on")


HAVE_NUMBA = _HAVE_NUMBA
USE_NUMBA = _HAVE_NUMBA and not _flag("KDLAB_DISABLE_NUMBA")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is installed, identity otherwise."""
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
