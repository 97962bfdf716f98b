"""Photometric fitting of a Gaussian scene to posed images.

Desk-scale reconstruction: plain gradient descent on the summed per-image
mean-squared render error plus two cross-view-consistency regularizers —
an opacity entropy term pushing opacities toward 0 or 1 (so object surfaces
never rely on half-transparent interior splats) and a flatness term pushing
splats toward surface-aligned disks.  The Gaussian count, poses, positions,
rotations, and object flags never change; the photometric term drives the
color coefficients while the regularizers drive opacity and scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView
from .errors import InvalidParameterError
from .render import backward_sh_gradient, render
from .scene import MAX_SH_DEGREE, GaussianScene, sh_coeff_count

_ALPHA_CLAMP = 1e-6
_SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class PosedImage:
    """One training view: an (H, W, 3) float image in [0, 1] and its camera."""

    image: np.ndarray
    camera: CameraView

    def __post_init__(self):
        arr = np.asarray(self.image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidParameterError(f"image must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidParameterError("image must be finite")
        object.__setattr__(self, "image", arr)


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 200
    lr_sh: float = 0.05
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    w_opacity: float = 0.01
    w_flat: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidParameterError("iterations must be >= 0")
        if self.w_opacity < 0 or self.w_flat < 0:
            raise InvalidParameterError("regularizer weights must be >= 0")
        if self.lr_sh < 0 or self.lr_opacity < 0 or self.lr_scale < 0:
            raise InvalidParameterError("learning rates must be >= 0")


def consistency_regularizers(scene: GaussianScene) -> tuple:
    """(L_opacity, L_flat) for the scene.

    L_opacity is the mean binary entropy of the opacities (zero exactly when
    every opacity is 0 or 1), with opacities clamped to
    [1e-6, 1 - 1e-6] before the logarithms.  L_flat is the mean, per
    Gaussian, of (smallest scale / median scale) — zero only for perfectly
    flat splats.
    """
    if len(scene) == 0:
        return 0.0, 0.0
    a = np.clip(scene.opacities.astype(np.float64), _ALPHA_CLAMP, 1.0 - _ALPHA_CLAMP)
    l_opacity = float(np.mean(-(a * np.log(a) + (1.0 - a) * np.log1p(-a))))
    s = np.sort(scene.scales.astype(np.float64), axis=1)
    l_flat = float(np.mean(s[:, 0] / s[:, 1]))
    return l_opacity, l_flat


def _regularizer_gradients(scene: GaussianScene) -> tuple:
    """Analytic (dL_opacity/d_opacity, dL_flat/d_scales)."""
    n = len(scene)
    a_raw = scene.opacities.astype(np.float64)
    inside = (a_raw > _ALPHA_CLAMP) & (a_raw < 1.0 - _ALPHA_CLAMP)
    a = np.clip(a_raw, _ALPHA_CLAMP, 1.0 - _ALPHA_CLAMP)
    d_opacity = np.where(inside, np.log((1.0 - a) / a), 0.0) / n

    scales = scene.scales.astype(np.float64)
    order = np.argsort(scales, axis=1, kind="stable")
    rows = np.arange(n)
    i_min, i_med = order[:, 0], order[:, 1]
    s_min = scales[rows, i_min]
    s_med = scales[rows, i_med]
    d_scales = np.zeros_like(scales)
    d_scales[rows, i_min] = 1.0 / s_med / n
    d_scales[rows, i_med] = -s_min / (s_med * s_med) / n
    return d_opacity, d_scales


def _photometric_pass(scene: GaussianScene, posed) -> tuple:
    """Summed per-image MSE and its gradient w.r.t. every SH coefficient."""
    total = 0.0
    grad_sh = np.zeros(scene.sh.shape, dtype=np.float64)
    for pi in posed:
        out = render(scene, pi.camera, with_trace=True)
        diff = out.rgb - pi.image
        n_px = diff.size
        total += float(np.sum(diff * diff)) / n_px
        grad_sh += backward_sh_gradient(out, (2.0 / n_px) * diff)
    return total, grad_sh


def fit_scene(posed_images, init: GaussianScene, cfg: FitConfig = FitConfig()) -> tuple:
    """Fit colors/opacities/scales of ``init`` to the posed images.

    Returns ``(scene, final_loss)`` where the loss is evaluated on the
    returned scene (so zero iterations returns a copy of ``init`` with its
    own loss).  The photometric term sums per-image MSE over the set, so
    duplicating an image doubles its pull exactly.
    """
    posed = list(posed_images)
    if len(posed) == 0:
        raise InvalidParameterError("need at least one posed image")
    if len(init) == 0:
        raise InvalidParameterError("initial scene must be non-empty")
    for pi in posed:
        if not isinstance(pi, PosedImage):
            raise InvalidParameterError("posed_images must contain PosedImage entries")

    scene = init.copy()
    for _ in range(cfg.iterations):
        _, grad_sh = _photometric_pass(scene, posed)
        d_opacity, d_scales = _regularizer_gradients(scene)
        scene.sh = (scene.sh.astype(np.float64) - cfg.lr_sh * grad_sh).astype(np.float32)
        scene.opacities = np.clip(
            scene.opacities.astype(np.float64) - cfg.lr_opacity * cfg.w_opacity * d_opacity,
            0.0, 1.0).astype(np.float32)
        scene.scales = np.maximum(
            scene.scales.astype(np.float64) - cfg.lr_scale * cfg.w_flat * d_scales,
            _SCALE_FLOOR).astype(np.float32)

    photometric, _ = _photometric_pass(scene, posed)
    l_opacity, l_flat = consistency_regularizers(scene)
    final_loss = photometric + cfg.w_opacity * l_opacity + cfg.w_flat * l_flat
    return scene, float(final_loss)


def random_init_scene(n_gaussians: int, bounds_min, bounds_max, rng_seed: int = 0,
                      degree: int = MAX_SH_DEGREE,
                      background_color=(0.0, 0.0, 0.0)) -> GaussianScene:
    """Uniform-random initialization inside an axis-aligned box: mid-gray
    colors, modest isotropic scales, half opacity, identity rotations."""
    if n_gaussians < 1:
        raise InvalidParameterError("need at least one gaussian")
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise InvalidParameterError("bounds must be ordered 3-vectors")
    rng = np.random.default_rng(rng_seed)
    k = sh_coeff_count(degree)
    extent = float((hi - lo).max())
    means = rng.uniform(lo, hi, size=(n_gaussians, 3))
    scales = np.full((n_gaussians, 3), 0.05 * extent)
    rotations = np.zeros((n_gaussians, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n_gaussians, 3, k))
    return GaussianScene(
        means=means.astype(np.float32),
        scales=scales.astype(np.float32),
        rotations=rotations.astype(np.float32),
        opacities=np.full(n_gaussians, 0.5, dtype=np.float32),
        sh=sh.astype(np.float32),
        is_object=np.zeros(n_gaussians, dtype=bool),
        background_color=background_color,
    )
