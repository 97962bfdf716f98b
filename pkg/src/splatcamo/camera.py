"""Pinhole cameras and orbit-style viewpoint construction.

Camera frame convention: x right, y down, z forward (toward the scene), so
image row indices grow with camera-space y.  ``rotation`` maps world to
camera coordinates; ``translation`` completes the rigid transform
``p_cam = R p_world + t``.  Pixel (px, py) samples the image plane at
(px + 0.5, py + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        if not 0.0 < fov_deg < 180.0:
            raise InvalidParameterError("fov must lie in (0, 180) degrees")
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(width=width, height=height, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height,
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(width=int(d["width"]), height=int(d["height"]),
                   fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]))


@dataclass
class CameraView:
    """World-to-camera rigid transform plus pinhole intrinsics."""

    rotation: np.ndarray  # (3, 3), world -> camera
    translation: np.ndarray  # (3,)
    intrinsics: Intrinsics

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise InvalidParameterError("camera pose must be finite")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("rotation must be orthonormal")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(),
                "intrinsics": self.intrinsics.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        return cls(rotation=np.array(d["rotation"], dtype=np.float64),
                   translation=np.array(d["translation"], dtype=np.float64),
                   intrinsics=Intrinsics.from_dict(d["intrinsics"]))


def make_viewpoint(target_center, distance: float, pitch_deg: float, azimuth_deg: float,
                   intrinsics: Intrinsics) -> CameraView:
    """Camera on a sphere around ``target_center``, looking at the center.

    ``pitch_deg`` is elevation above the horizontal plane, open interval
    (0, 90): at exactly 90 the view direction is parallel to the gravity up
    vector and the image orientation is undefined.  ``azimuth_deg`` rotates
    counter-clockwise about world +z with 0 along world +x.  The camera is
    placed at height ``distance * sin(pitch)`` above the target plane and
    rolled so that image-up aligns with gravity-up.
    """
    center = np.asarray(target_center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise InvalidParameterError("target_center must be finite")
    if not np.isfinite(distance) or distance <= 0.0:
        raise InvalidParameterError(f"distance must be positive, got {distance!r}")
    if not np.isfinite(pitch_deg) or not 0.0 < pitch_deg < 90.0:
        raise InvalidParameterError(f"pitch must lie strictly inside (0, 90) degrees, got {pitch_deg!r}")
    if not np.isfinite(azimuth_deg):
        raise InvalidParameterError("azimuth must be finite")

    pitch = math.radians(pitch_deg)
    azim = math.radians(azimuth_deg)
    offset = np.array([
        math.cos(pitch) * math.cos(azim),
        math.cos(pitch) * math.sin(azim),
        math.sin(pitch),
    ])
    position = center + distance * offset

    forward = center - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, WORLD_UP)
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise InvalidParameterError("view direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)

    rotation = np.stack([right, down, forward])
    translation = -rotation @ position
    return CameraView(rotation=rotation, translation=translation, intrinsics=intrinsics)
