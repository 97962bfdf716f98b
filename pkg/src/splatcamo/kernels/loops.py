"""Loop-form compositing kernels.

Plain-Python/numpy loop implementations written to be compiled by numba's
``njit`` (see ``numba_impl``).  They are intentionally scalar and branchy:
per pixel, splats arrive sorted front-to-back and are alpha-composited with
a hard 3-sigma Mahalanobis cutoff (d^T C^-1 d <= 9), an opacity ceiling of
0.99 per splat, and accumulation stopping once transmittance drops below
1e-4.  Pixel (px, py) samples at (px + 0.5, py + 0.5).

``cov_inv`` packs the inverse 2D covariance as (a, b, c) for [[a, b], [b, c]];
``radius`` is the 3-sigma bounding half-width in pixels.
"""

import math

import numpy as np

T_FLOOR = 1e-4
ALPHA_CEIL = 0.99
MAHA_CUTOFF = 9.0


def composite_forward(mean2d, cov_inv, radius, opacity, color, flags, height, width, bg, counts):
    """Front-to-back composite; fills ``counts`` per pixel when it has size.

    Returns (rgb, alpha, flag_alpha): full accumulated opacity plus the
    accumulated opacity restricted to splats with a nonzero flag, both under
    full-scene transmittance.
    """
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    flag_alpha = np.zeros((height, width))
    n = mean2d.shape[0]
    want_counts = counts.shape[0] > 0
    for py in range(height):
        sy = py + 0.5
        for px in range(width):
            sx = px + 0.5
            trans = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            acc = 0.0
            facc = 0.0
            cnt = 0
            for k in range(n):
                if trans < T_FLOOR:
                    break
                dx = sx - mean2d[k, 0]
                if dx > radius[k] or -dx > radius[k]:
                    continue
                dy = sy - mean2d[k, 1]
                if dy > radius[k] or -dy > radius[k]:
                    continue
                maha = cov_inv[k, 0] * dx * dx + 2.0 * cov_inv[k, 1] * dx * dy + cov_inv[k, 2] * dy * dy
                if maha > MAHA_CUTOFF:
                    continue
                a = opacity[k] * math.exp(-0.5 * maha)
                if a > ALPHA_CEIL:
                    a = ALPHA_CEIL
                w = a * trans
                r += color[k, 0] * w
                g += color[k, 1] * w
                b += color[k, 2] * w
                acc += w
                if flags[k] != 0:
                    facc += w
                trans *= 1.0 - a
                cnt += 1
            rgb[py, px, 0] = r + bg[0] * trans
            rgb[py, px, 1] = g + bg[1] * trans
            rgb[py, px, 2] = b + bg[2] * trans
            alpha[py, px] = acc
            flag_alpha[py, px] = facc
            if want_counts:
                counts[py * width + px] = cnt
    return rgb, alpha, flag_alpha


def fill_trace(mean2d, cov_inv, radius, opacity, height, width, offsets, idx_out, w_out):
    """Second pass: record (splat, weight) per pixel at ``offsets`` positions.

    Replays exactly the contribution rules of :func:`composite_forward`;
    entries land front-to-back per pixel.
    """
    n = mean2d.shape[0]
    for py in range(height):
        sy = py + 0.5
        for px in range(width):
            sx = px + 0.5
            cursor = offsets[py * width + px]
            trans = 1.0
            for k in range(n):
                if trans < T_FLOOR:
                    break
                dx = sx - mean2d[k, 0]
                if dx > radius[k] or -dx > radius[k]:
                    continue
                dy = sy - mean2d[k, 1]
                if dy > radius[k] or -dy > radius[k]:
                    continue
                maha = cov_inv[k, 0] * dx * dx + 2.0 * cov_inv[k, 1] * dx * dy + cov_inv[k, 2] * dy * dy
                if maha > MAHA_CUTOFF:
                    continue
                a = opacity[k] * math.exp(-0.5 * maha)
                if a > ALPHA_CEIL:
                    a = ALPHA_CEIL
                idx_out[cursor] = k
                w_out[cursor] = a * trans
                cursor += 1
                trans *= 1.0 - a


def replay_trace(offsets, idx, weights, grad_flat, out):
    """Scatter pixel gradients onto splat colors: out[k] += w * dL/drgb(p).

    ``grad_flat`` is (H*W, 3); ``out`` is (n_splats, 3), accumulated in
    pixel-major order so results are deterministic.
    """
    n_pix = offsets.shape[0] - 1
    for p in range(n_pix):
        g0 = grad_flat[p, 0]
        g1 = grad_flat[p, 1]
        g2 = grad_flat[p, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        for e in range(offsets[p], offsets[p + 1]):
            k = idx[e]
            w = weights[e]
            out[k, 0] += w * g0
            out[k, 1] += w * g1
            out[k, 2] += w * g2
