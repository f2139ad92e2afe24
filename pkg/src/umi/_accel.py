"""Selects between numba-compiled kernels and the pure-numpy fallback.

Set ``UMI_DISABLE_NUMBA=1`` before import to force the numpy path.
"""
import os

try:
    from numba import njit
    NUMBA_INSTALLED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_INSTALLED = False

DISABLE_NUMBA = os.environ.get("UMI_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")
USE_NUMBA = NUMBA_INSTALLED and not DISABLE_NUMBA


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is usable, identity otherwise."""
    def decorator(func):
        if NUMBA_INSTALLED:
            return njit(*args, **kwargs)(func)
        return func
    return decorator
