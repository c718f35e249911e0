"""Optional numba acceleration.

Set ``SPACKLE_DISABLE_NUMBA=1`` to force the pure-numpy code paths. Every
kernel in :mod:`spackle.kernels` has both implementations and they are
tested against each other.
"""

import os

_FLAG = os.environ.get("SPACKLE_DISABLE_NUMBA", "").strip().lower()
DISABLED = _FLAG in {"1", "true", "yes", "on"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

BACKENDS = ("numba", "numpy")


def default_backend():
    return "numba" if HAVE_NUMBA and not DISABLED else "numpy"


def resolve_backend(backend=None):
    if backend is None:
        return default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator.

    Compilation is lazy, so defining jitted kernels costs nothing when the
    numpy backend is selected.
    """
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
