"""Perspective splatting of 3D Gaussians with an exact color backward pass.

Forward path: each Gaussian is projected through the camera (EWA-style: the
world covariance is pushed through the pose and the pinhole Jacobian), given
a view-dependent SH color, depth-sorted front-to-back (ties broken by scene
index), and alpha-composited by the kernel backend.  Pinned numerics:

* near-plane cull at camera z < 0.01
* 0.3 px^2 isotropic blur floor added to every 2D covariance diagonal
* contributions only inside the 3-sigma ellipse (d^T C^-1 d <= 9)
* per-splat alpha ceiling 0.99, transmittance floor 1e-4

Backward path: the per-pixel (splat, weight) trace recorded during the
forward pass replays pixel gradients onto splat colors exactly —
d rgb(p) / d color_k = alpha'_k(p) * T_k(p) — then chains through the color
clamp (pass-through on [0, 1] inclusive, zero outside) into SH coefficients.
Geometry and opacity carry no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .camera import CameraView
from .errors import InvalidParameterError, MissingTraceError
from .scene import SH_C0, Gaussian3D, GaussianScene, quaternion_to_rotation, sh_basis

NEAR_PLANE = 0.01
BLUR_FLOOR = 0.3
ALPHA_CEIL = 0.99
T_FLOOR = 1e-4
MAHA_CUTOFF = 9.0
DEFAULT_MASK_THRESHOLD = 0.5


@dataclass
class Splat2D:
    """A Gaussian projected into one view."""

    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2) blurred screen-space covariance
    depth: float  # camera-space z
    color: np.ndarray  # (3,) clamped view-dependent color
    opacity: float
    source_index: int
    clamp_active: np.ndarray  # (3,) bool, True where the color clamp binds


class _Projected:
    """Batch projection result (kept splats only, scene order)."""

    __slots__ = ("mean2d", "cov2d", "cov_inv", "radius", "depth", "color",
                 "clamp_active", "opacity", "flags", "src", "basis")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _project_arrays(scene: GaussianScene, cam: CameraView, flags: np.ndarray) -> _Projected:
    n = len(scene)
    empty = _Projected(
        mean2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)), cov_inv=np.zeros((0, 3)),
        radius=np.zeros(0), depth=np.zeros(0), color=np.zeros((0, 3)),
        clamp_active=np.zeros((0, 3), dtype=bool), opacity=np.zeros(0),
        flags=np.zeros(0, dtype=np.uint8), src=np.zeros(0, dtype=np.int64),
        basis=np.zeros((0, scene.sh.shape[2])),
    )
    if n == 0:
        return empty

    r_wc = cam.rotation
    means = scene.means.astype(np.float64)
    t_cam = means @ r_wc.T + cam.translation
    keep = t_cam[:, 2] >= NEAR_PLANE
    if not np.any(keep):
        return empty

    src = np.flatnonzero(keep)
    t_cam = t_cam[src]
    tz = t_cam[:, 2]

    intr = cam.intrinsics
    u = intr.fx * t_cam[:, 0] / tz + intr.cx
    v = intr.fy * t_cam[:, 1] / tz + intr.cy

    # Rows of J @ R_wc without materializing J: J = [[fx/z, 0, -fx x/z^2],
    # [0, fy/z, -fy y/z^2]] in camera coordinates.
    m0 = (intr.fx / tz)[:, None] * r_wc[0] - (intr.fx * t_cam[:, 0] / tz**2)[:, None] * r_wc[2]
    m1 = (intr.fy / tz)[:, None] * r_wc[1] - (intr.fy * t_cam[:, 1] / tz**2)[:, None] * r_wc[2]

    q = scene.rotations[src].astype(np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((len(src), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    s2 = scene.scales[src].astype(np.float64) ** 2
    sigma = np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    a0 = np.einsum("ni,nij,nj->n", m0, sigma, m0) + BLUR_FLOOR
    b0 = np.einsum("ni,nij,nj->n", m0, sigma, m1)
    c0 = np.einsum("ni,nij,nj->n", m1, sigma, m1) + BLUR_FLOOR

    det = a0 * c0 - b0 * b0
    cov_inv = np.stack([c0 / det, -b0 / det, a0 / det], axis=1)
    lam_max = 0.5 * (a0 + c0) + np.sqrt((0.5 * (a0 - c0)) ** 2 + b0 * b0)
    radius = 3.0 * np.sqrt(lam_max)

    on_screen = ((u + radius >= 0.0) & (u - radius <= intr.width) &
                 (v + radius >= 0.0) & (v - radius <= intr.height))
    if not np.all(on_screen):
        pick = np.flatnonzero(on_screen)
        src = src[pick]
        if len(src) == 0:
            return empty
        u, v, tz = u[pick], v[pick], tz[pick]
        a0, b0, c0 = a0[pick], b0[pick], c0[pick]
        cov_inv, radius = cov_inv[pick], radius[pick]

    dirs = cam.position - scene.means[src].astype(np.float64)
    basis = np.atleast_2d(sh_basis(dirs, scene.sh_degree))
    raw = 0.5 + np.einsum("nck,nk->nc", scene.sh[src].astype(np.float64), basis)
    color = np.clip(raw, 0.0, 1.0)
    clamp_active = (raw < 0.0) | (raw > 1.0)

    cov2d = np.empty((len(src), 2, 2))
    cov2d[:, 0, 0] = a0
    cov2d[:, 0, 1] = b0
    cov2d[:, 1, 0] = b0
    cov2d[:, 1, 1] = c0

    return _Projected(
        mean2d=np.stack([u, v], axis=1), cov2d=cov2d, cov_inv=cov_inv, radius=radius,
        depth=tz, color=color, clamp_active=clamp_active,
        opacity=scene.opacities[src].astype(np.float64),
        flags=flags[src].astype(np.uint8), src=src, basis=basis,
    )


def project_gaussian(gaussian: Gaussian3D, cam: CameraView) -> Optional[Splat2D]:
    """Project a single Gaussian; returns None when culled."""
    scene = GaussianScene.from_gaussians([gaussian])
    proj = _project_arrays(scene, cam, scene.is_object.astype(np.uint8))
    if len(proj.src) == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0], cov2d=proj.cov2d[0], depth=float(proj.depth[0]),
        color=proj.color[0], opacity=float(proj.opacity[0]), source_index=0,
        clamp_active=proj.clamp_active[0],
    )


@dataclass
class RenderOutput:
    """Rendered view plus the optional gradient-replay trace."""

    rgb: np.ndarray  # (H, W, 3) float64 in [0, 1]
    alpha: np.ndarray  # (H, W) accumulated opacity
    object_alpha: np.ndarray  # (H, W) object-only accumulated opacity
    width: int
    height: int

    # Trace state (populated when rendered with_trace=True).
    trace_offsets: Optional[np.ndarray] = None  # (H*W + 1,) CSR offsets
    trace_sources: Optional[np.ndarray] = None  # scene index per entry
    trace_weights: Optional[np.ndarray] = None  # alpha'_k * T_k per entry

    # Per-kept-splat arrays needed to chain pixel gradients into SH space.
    _kept_src: Optional[np.ndarray] = None
    _kept_clamp_active: Optional[np.ndarray] = None
    _kept_basis: Optional[np.ndarray] = None
    _kept_entries: Optional[np.ndarray] = None  # kernel indices -> kept order
    _n_scene: int = 0
    _obj_slot: Optional[np.ndarray] = None  # scene index -> object position or -1

    @property
    def has_trace(self) -> bool:
        return self.trace_offsets is not None


def render(scene: GaussianScene, cam: CameraView, with_trace: bool = False,
           flags: Optional[np.ndarray] = None) -> RenderOutput:
    """Render the scene into ``cam``.

    ``flags`` overrides which splats count toward ``object_alpha`` (defaults
    to the scene's ``is_object``); useful for masks of other subsets.
    """
    if flags is None:
        flags = scene.is_object.astype(np.uint8)
    else:
        flags = np.asarray(flags).astype(np.uint8).reshape(len(scene))
    proj = _project_arrays(scene, cam, flags)
    h, w = cam.height, cam.width

    order = np.argsort(proj.depth, kind="stable")
    mean2d = np.ascontiguousarray(proj.mean2d[order])
    cov_inv = np.ascontiguousarray(proj.cov_inv[order])
    radius = np.ascontiguousarray(proj.radius[order])
    opacity = np.ascontiguousarray(proj.opacity[order])
    color = np.ascontiguousarray(proj.color[order])
    kflags = np.ascontiguousarray(proj.flags[order])

    bg = scene.background_color.astype(np.float64)
    rgb, alpha, obj_alpha, offsets, idx, weights = kernels.composite(
        mean2d, cov_inv, radius, opacity, color, kflags, h, w, bg, with_trace)

    out = RenderOutput(rgb=rgb, alpha=alpha, object_alpha=obj_alpha, width=w, height=h)
    if with_trace:
        src_sorted = proj.src[order]
        out.trace_offsets = offsets
        out.trace_sources = src_sorted[idx] if idx.size else np.zeros(0, dtype=np.int64)
        out.trace_weights = weights
        out._kept_src = src_sorted
        out._kept_clamp_active = proj.clamp_active[order]
        out._kept_basis = proj.basis[order]
        out._kept_entries = idx
        out._n_scene = len(scene)
        obj_slot = np.full(len(scene), -1, dtype=np.int64)
        obj_idx = scene.object_indices()
        obj_slot[obj_idx] = np.arange(len(obj_idx))
        out._obj_slot = obj_slot
    return out


def render_object_mask(scene: GaussianScene, cam: CameraView,
                       threshold: float = DEFAULT_MASK_THRESHOLD,
                       flags: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary object mask: accumulated object opacity >= threshold.

    Occlusion-aware — rendering keeps full-scene transmittance, so object
    splats hidden behind background geometry do not reach the threshold.
    ``flags`` masks an arbitrary splat subset instead of the object flags.
    """
    if not 0.0 < threshold <= 1.0:
        raise InvalidParameterError(f"mask threshold must lie in (0, 1], got {threshold!r}")
    return render(scene, cam, flags=flags).object_alpha >= threshold


def composite_detect_image(rendered: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste the rendered object region into the original image: R*M + O*(1-M)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if rendered.shape != original.shape or rendered.ndim != 3:
        raise InvalidParameterError("rendered and original images must share an (H, W, 3) shape")
    m = np.asarray(mask)
    if m.shape != rendered.shape[:2]:
        raise InvalidParameterError("mask must match image height and width")
    m = m.astype(np.float64)[:, :, None]
    return rendered * m + original * (1.0 - m)


def _replay_to_kept(output: RenderOutput, grad_pixels: np.ndarray) -> np.ndarray:
    """Trace replay: pixel gradients -> per-kept-splat dL/d(clamped color)."""
    if not output.has_trace:
        raise MissingTraceError("render output carries no contribution trace; render with with_trace=True")
    grad = np.asarray(grad_pixels, dtype=np.float64)
    if grad.shape != (output.height, output.width, 3):
        raise InvalidParameterError(
            f"gradient image must have shape {(output.height, output.width, 3)}, got {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise InvalidParameterError("gradient image must be finite")
    grad_flat = np.ascontiguousarray(grad.reshape(-1, 3))
    return kernels.replay(output.trace_offsets, output._kept_entries, output.trace_weights,
                          grad_flat, len(output._kept_src))


def backward_color_gradient(output: RenderOutput, grad_pixels: np.ndarray) -> np.ndarray:
    """Exact gradient of a pixel loss w.r.t. object zero-order SH coefficients.

    Returns (n_objects, 3) aligned with the scene's object order (the same
    layout ``zero_order_view`` exposes).  Rows for object Gaussians that were
    culled or fully occluded are zero; background Gaussians have no slot at
    all.  Linearity in ``grad_pixels`` is exact.
    """
    dldc = _replay_to_kept(output, grad_pixels)
    dldraw = np.where(output._kept_clamp_active, 0.0, dldc)
    n_obj = int((output._obj_slot >= 0).sum())
    out = np.zeros((n_obj, 3))
    slots = output._obj_slot[output._kept_src]
    kept_obj = np.flatnonzero(slots >= 0)
    np.add.at(out, slots[kept_obj], SH_C0 * dldraw[kept_obj])
    return out


def backward_sh_gradient(output: RenderOutput, grad_pixels: np.ndarray) -> np.ndarray:
    """Gradient of a pixel loss w.r.t. every SH coefficient of every Gaussian.

    Returns (n_scene, 3, K).  Used by reconstruction; the camouflage path
    only needs :func:`backward_color_gradient`.
    """
    dldc = _replay_to_kept(output, grad_pixels)
    dldraw = np.where(output._kept_clamp_active, 0.0, dldc)
    k = output._kept_basis.shape[1]
    out = np.zeros((output._n_scene, 3, k))
    contrib = dldraw[:, :, None] * output._kept_basis[:, None, :]
    np.add.at(out, output._kept_src, contrib)
    return out
