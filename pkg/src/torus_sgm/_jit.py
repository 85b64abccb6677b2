"""Optional numba acceleration.

Set ``TORUS_SGM_DISABLE_JIT=1`` to force the pure numpy code paths. When numba
is missing the flag is ignored and numpy is always used.
"""

import os

_DISABLED = os.environ.get("TORUS_SGM_DISABLE_JIT", "0").strip().lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

JIT_AVAILABLE = _numba is not None
JIT_ENABLED = JIT_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if JIT_AVAILABLE:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
