"""Compositing kernel backends.

Two interchangeable implementations of the pixel kernels: a numba ``njit``
build of the loop kernels (default when numba imports) and a vectorized
pure-numpy fallback.  Select with the ``SPLATCAMO_BACKEND`` environment
variable (``numba`` or ``numpy``) or at runtime via :func:`set_backend`.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os
import warnings

from . import numpy_impl

_ENV_VAR = "SPLATCAMO_BACKEND"
_VALID = ("numba", "numpy")


def _load(name):
    if name == "numpy":
        return numpy_impl
    try:
        from . import numba_impl
        return numba_impl
    except ImportError as e:
        warnings.warn(f"numba backend unavailable ({e}); falling back to numpy", RuntimeWarning)
        return numpy_impl


def _initial():
    requested = os.environ.get(_ENV_VAR, "").strip().lower()
    if requested and requested not in _VALID:
        raise ValueError(f"{_ENV_VAR} must be one of {_VALID}, got {requested!r}")
    return _load(requested or "numba")


_active = _initial()


def active_backend() -> str:
    """Name of the backend in use: 'numba' or 'numpy'."""
    return _active.NAME


def set_backend(name: str) -> str:
    """Switch kernel backend at runtime; returns the name actually active."""
    global _active
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    _active = _load(name)
    return _active.NAME


def composite(mean2d, cov_inv, radius, opacity, color, flags, height, width, bg, with_trace):
    """Composite sorted splats; returns (rgb, alpha, flag_alpha, offsets, idx, weights)."""
    return _active.composite(mean2d, cov_inv, radius, opacity, color, flags,
                             height, width, bg, with_trace)


def replay(offsets, idx, weights, grad_flat, n_splats):
    """Accumulate per-splat color gradients from a contribution trace."""
    return _active.replay(offsets, idx, weights, grad_flat, n_splats)
