"""Scene model: anisotropic 3D Gaussians with spherical-harmonic color.

A scene is a flat collection of Gaussians, each carrying geometry (mean,
per-axis scale, unit quaternion), an opacity in [0, 1], per-channel SH
coefficients, and an ``is_object`` flag separating the paintable target from
its static surroundings.  Storage is float32; math helpers compute in
float64.

Quaternions are stored in (w, x, y, z) order.  The SH basis is the real
spherical-harmonic basis (no Condon-Shortley sign folding), degrees 0..3.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

# Zero-order real spherical harmonic: Y_00 = sqrt(1 / (4*pi)).
SH_C0 = 0.28209479177387814

_SH_C1 = 0.4886025119029199
_SH_C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)
_SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sh_coeff_count(degree: int) -> int:
    if not isinstance(degree, (int, np.integer)) or degree < 0 or degree > MAX_SH_DEGREE:
        raise InvalidParameterError(f"sh degree must be an int in [0, {MAX_SH_DEGREE}], got {degree!r}")
    return (degree + 1) ** 2


def sh_basis(direction, degree: int) -> np.ndarray:
    """Evaluate the real SH basis at unit direction(s).

    direction: (3,) or (N, 3).  Returns (K,) or (N, K) float64 with
    K = (degree+1)^2.  Directions are normalized here; a zero vector is
    rejected.
    """
    k = sh_coeff_count(degree)
    d = np.asarray(direction, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    if d.shape[-1] != 3:
        raise InvalidParameterError(f"direction must have 3 components, got shape {d.shape}")
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if not np.all(np.isfinite(d)) or np.any(norm == 0.0):
        raise InvalidParameterError("direction must be finite and nonzero")
    d = d / norm
    x, y, z = d[:, 0], d[:, 1], d[:, 2]

    out = np.empty((d.shape[0], k), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = _SH_C1 * y
        out[:, 2] = _SH_C1 * z
        out[:, 3] = _SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _SH_C2[0] * x * y
        out[:, 5] = _SH_C2[1] * y * z
        out[:, 6] = _SH_C2[2] * (3.0 * zz - 1.0)
        out[:, 7] = _SH_C2[3] * x * z
        out[:, 8] = _SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = _SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = _SH_C3[1] * x * y * z
        out[:, 11] = _SH_C3[2] * y * (5.0 * zz - 1.0)
        out[:, 12] = _SH_C3[3] * z * (5.0 * zz - 3.0)
        out[:, 13] = _SH_C3[4] * x * (5.0 * zz - 1.0)
        out[:, 14] = _SH_C3[5] * z * (xx - yy)
        out[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return out[0] if single else out


def eval_sh_color(sh, direction, degree: int, return_raw: bool = False):
    """Color from SH coefficients viewed from ``direction``.

    sh: (3, K) for one Gaussian or (N, 3, K); direction: (3,) or (N, 3).
    Returns clamp(0.5 + sum_k sh[..,ch,k] * Y_k(dir), 0, 1) per channel.
    With ``return_raw`` also returns the pre-clamp value (used for clamp
    subgradients).
    """
    k = sh_coeff_count(degree)
    coeffs = np.asarray(sh, dtype=np.float64)
    single = coeffs.ndim == 2
    coeffs = coeffs[np.newaxis] if single else coeffs
    if coeffs.ndim != 3 or coeffs.shape[1] != 3 or coeffs.shape[2] != k:
        raise InvalidParameterError(
            f"sh must have shape (3, {k}) or (N, 3, {k}) for degree {degree}, got {np.asarray(sh).shape}"
        )
    basis = sh_basis(direction, degree)
    basis = np.atleast_2d(basis)
    if basis.shape[0] == 1 and coeffs.shape[0] > 1:
        basis = np.broadcast_to(basis, (coeffs.shape[0], k))
    raw = 0.5 + np.einsum("nck,nk->nc", coeffs, basis)
    clamped = np.clip(raw, 0.0, 1.0)
    if single:
        raw, clamped = raw[0], clamped[0]
    return (clamped, raw) if return_raw else clamped


def rgb_to_zero_order(rgb) -> np.ndarray:
    """Zero-order coefficients that reproduce ``rgb`` under a zeroed SH tail."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def quaternion_to_rotation(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation matrix (float64)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise InvalidParameterError("rotation must be a finite quaternion of shape (4,)")
    n = np.linalg.norm(q)
    if n == 0.0:
        raise InvalidParameterError("rotation quaternion must be nonzero")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def covariance_from_scale_rotation(scale, rotation) -> np.ndarray:
    """World-space covariance R diag(scale^2) R^T (float64, symmetric PSD)."""
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (3,) or not np.all(np.isfinite(s)) or np.any(s <= 0.0):
        raise InvalidParameterError("scale must be 3 finite strictly positive values")
    r = quaternion_to_rotation(rotation)
    return (r * (s * s)) @ r.T


@dataclass
class Gaussian3D:
    """One anisotropic Gaussian primitive."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    sh: np.ndarray  # (3, K) per-channel coefficients
    is_object: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float32).reshape(3)
        self.sh = np.asarray(self.sh, dtype=np.float32)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(self.mean)):
            raise InvalidParameterError("mean must be finite")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0.0):
            raise InvalidParameterError("scale must be finite and strictly positive")
        if not np.all(np.isfinite(rot)) or np.linalg.norm(rot) == 0.0:
            raise InvalidParameterError("rotation quaternion must be finite and nonzero")
        # Renormalize only when off by more than float32 unit roundoff, so an
        # already-unit quaternion keeps its exact bits (round-trip stability).
        n = np.linalg.norm(rot)
        if abs(n - 1.0) > 1e-7:
            rot = rot / n
        self.rotation = rot.astype(np.float32)
        if not np.isfinite(self.opacity) or not 0.0 <= float(self.opacity) <= 1.0:
            raise InvalidParameterError(f"opacity must be in [0, 1], got {self.opacity!r}")
        self.opacity = float(self.opacity)
        if self.sh.ndim != 2 or self.sh.shape[0] != 3 or not np.all(np.isfinite(self.sh)):
            raise InvalidParameterError("sh must be a finite (3, K) array")
        k = self.sh.shape[1]
        if k not in {sh_coeff_count(d) for d in range(MAX_SH_DEGREE + 1)}:
            raise InvalidParameterError(f"sh coefficient count {k} is not (d+1)^2 for d in 0..{MAX_SH_DEGREE}")
        self.is_object = bool(self.is_object)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @classmethod
    def with_color(cls, mean, scale, rotation, opacity, rgb, degree: int = MAX_SH_DEGREE, is_object: bool = False):
        """Gaussian whose zero-order color is ``rgb`` with a zeroed SH tail."""
        sh = np.zeros((3, sh_coeff_count(degree)), dtype=np.float32)
        sh[:, 0] = rgb_to_zero_order(rgb)
        return cls(mean=mean, scale=scale, rotation=rotation, opacity=opacity, sh=sh, is_object=is_object)

    def covariance(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.scale, self.rotation)


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian collection plus a background color.

    All Gaussians share one SH degree.  The zero-order coefficients of the
    object Gaussians are snapshotted at construction; color edits through
    :func:`zero_order_view` never touch the snapshot, so the pristine
    appearance stays recoverable in memory.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    is_object: np.ndarray
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))

    def __post_init__(self):
        n = len(self.means)
        self.means = np.ascontiguousarray(self.means, dtype=np.float32).reshape(n, 3)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float32).reshape(n, 3)
        rot = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float32).reshape(n)
        self.sh = np.ascontiguousarray(self.sh, dtype=np.float32)
        self.is_object = np.ascontiguousarray(self.is_object, dtype=bool).reshape(n)
        self.background_color = np.asarray(self.background_color, dtype=np.float32).reshape(3)

        if self.sh.ndim != 2 and self.sh.ndim != 3:
            raise InvalidParameterError("sh must have shape (N, 3, K)")
        if self.sh.size == 0:
            k = self.sh.shape[-1] if self.sh.ndim == 3 and self.sh.shape[-1] else 1
            self.sh = self.sh.reshape(n, 3, k)
        else:
            self.sh = self.sh.reshape(n, 3, -1)
        k = self.sh.shape[2]
        if k not in {sh_coeff_count(d) for d in range(MAX_SH_DEGREE + 1)}:
            raise InvalidParameterError(f"sh coefficient count {k} is not (d+1)^2 for d in 0..{MAX_SH_DEGREE}")
        for name, arr in (("means", self.means), ("scales", self.scales), ("sh", self.sh),
                          ("opacities", self.opacities), ("background_color", self.background_color)):
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} must be finite")
        if np.any(self.scales <= 0.0):
            raise InvalidParameterError("scales must be strictly positive")
        if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
            raise InvalidParameterError("opacities must lie in [0, 1]")
        norms = np.linalg.norm(rot, axis=1)
        if not np.all(np.isfinite(rot)) or np.any(norms == 0.0):
            raise InvalidParameterError("rotation quaternions must be finite and nonzero")
        # Same float32-stable renormalization rule as Gaussian3D.
        off = np.abs(norms - 1.0) > 1e-7
        if np.any(off):
            rot = rot.copy()
            rot[off] /= norms[off, None]
        self.rotations = rot.astype(np.float32)

        self._k0_original = self.sh[self.is_object, :, 0].astype(np.float32).copy()

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[2]))) - 1

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            sh=self.sh[i].copy(),
            is_object=bool(self.is_object[i]),
        )

    @classmethod
    def from_gaussians(cls, gaussians, background_color=(0.0, 0.0, 0.0)) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(background_color=background_color)
        degrees = {g.sh_degree for g in gaussians}
        if len(degrees) != 1:
            raise InvalidParameterError(f"all Gaussians must share one SH degree, got {sorted(degrees)}")
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
            is_object=np.array([g.is_object for g in gaussians]),
            background_color=background_color,
        )

    @classmethod
    def empty(cls, degree: int = MAX_SH_DEGREE, background_color=(0.0, 0.0, 0.0)) -> "GaussianScene":
        k = sh_coeff_count(degree)
        return cls(
            means=np.zeros((0, 3)), scales=np.ones((0, 3)),
            rotations=np.tile(np.array([1.0, 0, 0, 0]), (0, 1)).reshape(0, 4),
            opacities=np.zeros(0), sh=np.zeros((0, 3, k)), is_object=np.zeros(0, dtype=bool),
            background_color=background_color,
        )

    def object_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_object)

    @property
    def num_objects(self) -> int:
        return int(self.is_object.sum())

    def copy(self) -> "GaussianScene":
        out = GaussianScene(
            means=self.means.copy(), scales=self.scales.copy(), rotations=self.rotations.copy(),
            opacities=self.opacities.copy(), sh=self.sh.copy(), is_object=self.is_object.copy(),
            background_color=self.background_color.copy(),
        )
        out._k0_original = self._k0_original.copy()
        return out

    def original_zero_order(self) -> np.ndarray:
        """Snapshot of object zero-order coefficients taken at construction."""
        return self._k0_original.copy()

    def with_original_colors(self) -> "GaussianScene":
        """Copy of the scene with object zero-order coefficients restored."""
        out = self.copy()
        out.sh[out.is_object, :, 0] = self._k0_original
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.sh_degree).tobytes())
        for arr in (self.means, self.scales, self.rotations, self.opacities,
                    self.sh, self.is_object.astype(np.uint8), self.background_color):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class ZeroOrderView:
    """Read/write handle over the zero-order SH coefficients of object Gaussians.

    Writes go straight into the scene's coefficient storage; every other
    field (geometry, opacity, higher SH orders, background Gaussians) is out
    of reach by construction.
    """

    def __init__(self, scene: GaussianScene):
        if scene.num_objects == 0:
            raise InvalidParameterError("scene has no object Gaussians")
        self._scene = scene
        self._indices = scene.object_indices()

    @property
    def indices(self) -> np.ndarray:
        return self._indices.copy()

    def __len__(self) -> int:
        return len(self._indices)

    def get(self) -> np.ndarray:
        """(n_obj, 3) float64 copy of the current coefficients."""
        return self._scene.sh[self._indices, :, 0].astype(np.float64)

    def set(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(self._indices), 3):
            raise InvalidParameterError(f"expected shape {(len(self._indices), 3)}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameterError("coefficients must be finite")
        self._scene.sh[self._indices, :, 0] = values.astype(np.float32)

    def original(self) -> np.ndarray:
        """(n_obj, 3) float64 snapshot taken when the scene was built."""
        return self._scene._k0_original.astype(np.float64)


def zero_order_view(scene: GaussianScene) -> ZeroOrderView:
    """Mutable view over object zero-order color coefficients."""
    return ZeroOrderView(scene)
