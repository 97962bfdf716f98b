"""Vectorized numpy backend.

Same contribution rules as ``loops`` (3-sigma cutoff, 0.99 opacity ceiling,
1e-4 transmittance floor, half-pixel sample centers) but organized
splat-by-splat: each sorted splat updates the pixels of its bounding box as
one vectorized operation against a running transmittance image.  Skipping a
pixel once its transmittance sits below the floor is equivalent to the
per-pixel early break in the loop kernels because transmittance never
increases.
"""

import numpy as np

from .loops import ALPHA_CEIL, MAHA_CUTOFF, T_FLOOR

NAME = "numpy"


def _boxes(mean2d, radius, height, width):
    """Inclusive pixel index bounds of each splat's |d| <= radius box."""
    x_lo = np.ceil(mean2d[:, 0] - radius - 0.5).astype(np.int64)
    x_hi = np.floor(mean2d[:, 0] + radius - 0.5).astype(np.int64)
    y_lo = np.ceil(mean2d[:, 1] - radius - 0.5).astype(np.int64)
    y_hi = np.floor(mean2d[:, 1] + radius - 0.5).astype(np.int64)
    np.clip(x_lo, 0, width - 1, out=x_lo)
    np.clip(x_hi, 0, width - 1, out=x_hi)
    np.clip(y_lo, 0, height - 1, out=y_lo)
    np.clip(y_hi, 0, height - 1, out=y_hi)
    return x_lo, x_hi, y_lo, y_hi


def composite(mean2d, cov_inv, radius, opacity, color, flags, height, width, bg, with_trace):
    n = mean2d.shape[0]
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    flag_alpha = np.zeros((height, width))
    trans = np.ones((height, width))
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5

    entries_pix = []
    entries_idx = []
    entries_w = []

    x_lo, x_hi, y_lo, y_hi = _boxes(mean2d, radius, height, width)
    in_frame = ((mean2d[:, 0] + radius >= 0.5) & (mean2d[:, 0] - radius <= width - 0.5) &
                (mean2d[:, 1] + radius >= 0.5) & (mean2d[:, 1] - radius <= height - 0.5))

    for k in range(n):
        if not in_frame[k]:
            continue
        xl, xh, yl, yh = x_lo[k], x_hi[k], y_lo[k], y_hi[k]
        if xh < xl or yh < yl:
            continue
        dx = xs[xl:xh + 1] - mean2d[k, 0]
        dy = ys[yl:yh + 1] - mean2d[k, 1]
        maha = (cov_inv[k, 0] * dx[None, :] ** 2
                + 2.0 * cov_inv[k, 1] * dx[None, :] * dy[:, None]
                + cov_inv[k, 2] * dy[:, None] ** 2)
        t_box = trans[yl:yh + 1, xl:xh + 1]
        live = (maha <= MAHA_CUTOFF) & (t_box >= T_FLOOR)
        if not live.any():
            continue
        a = np.minimum(opacity[k] * np.exp(-0.5 * maha), ALPHA_CEIL)
        w = np.where(live, a * t_box, 0.0)
        rgb[yl:yh + 1, xl:xh + 1] += w[:, :, None] * color[k]
        alpha[yl:yh + 1, xl:xh + 1] += w
        if flags[k] != 0:
            flag_alpha[yl:yh + 1, xl:xh + 1] += w
        trans[yl:yh + 1, xl:xh + 1] = np.where(live, t_box * (1.0 - a), t_box)
        if with_trace:
            py, px = np.nonzero(live)
            entries_pix.append((py + yl) * width + (px + xl))
            entries_idx.append(np.full(py.shape[0], k, dtype=np.int64))
            entries_w.append(w[py, px])

    rgb += trans[:, :, None] * np.asarray(bg)

    if not with_trace:
        return rgb, alpha, flag_alpha, None, None, None

    if entries_pix:
        pix = np.concatenate(entries_pix)
        idx = np.concatenate(entries_idx)
        weights = np.concatenate(entries_w)
        # Entries were appended in splat (front-to-back) order; a stable sort
        # by pixel therefore yields per-pixel front-to-back traces.
        order = np.argsort(pix, kind="stable")
        pix, idx, weights = pix[order], idx[order], weights[order]
        counts = np.bincount(pix, minlength=height * width)
    else:
        idx = np.empty(0, dtype=np.int64)
        weights = np.empty(0, dtype=np.float64)
        counts = np.zeros(height * width, dtype=np.int64)
    offsets = np.zeros(height * width + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return rgb, alpha, flag_alpha, offsets, idx, weights


def replay(offsets, idx, weights, grad_flat, n_splats):
    out = np.zeros((n_splats, 3))
    if idx.shape[0] == 0:
        return out
    pix = np.repeat(np.arange(offsets.shape[0] - 1), np.diff(offsets))
    np.add.at(out, idx, weights[:, None] * grad_flat[pix])
    return out
