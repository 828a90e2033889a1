"""Backend switch for the hot numeric kernels.

Every kernel in this package exists twice: a loop version compiled with
``numba.njit`` and a vectorised pure-numpy version.  The numba path is used
when numba imports cleanly and ``JOINTEMBED_DISABLE_NUMBA`` is unset (or set
to ``0``/``false``).  The flag is read once, at import time.
"""

import os

_FLAG = os.environ.get("JOINTEMBED_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by JOINTEMBED_DISABLE_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def select(numba_impl, numpy_impl):
    """Pick the implementation for the active backend."""
    return numba_impl if HAVE_NUMBA else numpy_impl


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
