"""numba-compiled backend: the loop kernels from ``loops`` wrapped in njit."""

import numpy as np
from numba import njit

from . import loops

NAME = "numba"

_forward = njit(cache=True)(loops.composite_forward)
_fill = njit(cache=True)(loops.fill_trace)
_replay = njit(cache=True)(loops.replay_trace)


def composite(mean2d, cov_inv, radius, opacity, color, flags, height, width, bg, with_trace):
    counts = np.zeros(height * width if with_trace else 0, dtype=np.int64)
    rgb, alpha, flag_alpha = _forward(mean2d, cov_inv, radius, opacity, color, flags,
                                      height, width, bg, counts)
    if not with_trace:
        return rgb, alpha, flag_alpha, None, None, None
    offsets = np.zeros(height * width + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    idx = np.empty(total, dtype=np.int64)
    weights = np.empty(total, dtype=np.float64)
    _fill(mean2d, cov_inv, radius, opacity, height, width, offsets, idx, weights)
    return rgb, alpha, flag_alpha, offsets, idx, weights


def replay(offsets, idx, weights, grad_flat, n_splats):
    out = np.zeros((n_splats, 3))
    _replay(offsets, idx, weights, grad_flat, out)
    return out
