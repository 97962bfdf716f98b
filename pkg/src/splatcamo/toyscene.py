"""Canonical toy scene: a painted target blob on textured ground.

Deterministic generator (fixed seed) for the standard desk-scale fixture
used throughout the tests and the CLI:

* ~200 object Gaussians forming a vehicle-proxy blob (a boxy body plus a
  cabin) painted a saturated warm color — these are the attackable ones;
* ~300 background Gaussians: a green/brown textured ground plane, a cool
  blue decoy blob (the second detector class), and scattered clutter;
* a sky-colored clear background.

Also provides the matching camera grids: two distances, three pitches, a
10-degree azimuth ring, at 64x64 resolution.
"""

from __future__ import annotations

import numpy as np

from .camera import Intrinsics
from .evaluate import ViewGrid
from .scene import GaussianScene, rgb_to_zero_order, sh_coeff_count

TOY_IMAGE_SIZE = 64
TOY_FOV_DEG = 50.0
TOY_TARGET_CENTER = (0.0, 0.0, 0.35)
TOY_DISTANCES = (5.0, 8.0)
TOY_PITCHES = (25.0, 40.0, 55.0)
TOY_AZIMUTH_STEP = 10.0
_DEGREE = 1  # flat paint: zero-order color only, one ring of zeros above it


def _colored(rng, n, base, jitter):
    rgb = np.clip(np.asarray(base) + rng.uniform(-jitter, jitter, size=(n, 3)), 0.02, 0.98)
    k = sh_coeff_count(_DEGREE)
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = rgb_to_zero_order(rgb)
    return sh


def _random_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_toy_scene(seed: int = 0):
    """Build the fixture; returns ``(scene, info)``.

    ``info`` records the index ranges of each part — in particular
    ``info["decoy_indices"]``, the background Gaussians whose rendered mask
    defines the second (decoy) detector class.  Index layout is stable, so
    it survives a save/load round trip.
    """
    rng = np.random.default_rng(seed)

    means, scales, rotations, opacities, shs, flags = [], [], [], [], [], []

    def add(mean, scale, rotation, opacity, sh, is_object):
        means.append(mean)
        scales.append(scale)
        rotations.append(rotation)
        opacities.append(opacity)
        shs.append(sh)
        flags.append(np.full(len(mean), is_object))

    # --- target blob: body (140) + cabin (60), warm paint ------------------
    n_body, n_cabin = 140, 60
    body = rng.uniform([-1.0, -0.5, 0.06], [1.0, 0.5, 0.5], size=(n_body, 3))
    add(body, rng.uniform(0.10, 0.20, size=(n_body, 3)), _random_rotations(rng, n_body),
        rng.uniform(0.85, 0.95, size=n_body),
        _colored(rng, n_body, (0.78, 0.12, 0.10), 0.04), True)
    cabin = rng.uniform([-0.45, -0.38, 0.5], [0.45, 0.38, 0.78], size=(n_cabin, 3))
    add(cabin, rng.uniform(0.09, 0.16, size=(n_cabin, 3)), _random_rotations(rng, n_cabin),
        rng.uniform(0.85, 0.95, size=n_cabin),
        _colored(rng, n_cabin, (0.72, 0.15, 0.12), 0.04), True)

    # --- ground plane: flat two-tone disks ---------------------------------
    # The ground stops at |x|,|y| <= 3.5 (every camera orbit keeps a
    # horizontal radius >= 4.5) and the disks are small: big soft disks
    # overlap so much in image space that their 3-sigma tails stack into a
    # translucent fog over every low-pitch sightline to the target.
    n_ground = 300
    gxy = rng.uniform(-3.5, 3.5, size=(n_ground, 2))
    gmeans = np.concatenate([gxy, np.full((n_ground, 1), -0.02)], axis=1)
    gscales = np.concatenate([rng.uniform(0.22, 0.38, size=(n_ground, 2)),
                              np.full((n_ground, 1), 0.02)], axis=1)
    grot = np.zeros((n_ground, 4))
    grot[:, 0] = 1.0
    tone = rng.random(n_ground) < 0.6
    gsh = np.where(tone[:, None, None],
                   _colored(rng, n_ground, (0.30, 0.46, 0.22), 0.06),
                   _colored(rng, n_ground, (0.42, 0.34, 0.22), 0.06))
    add(gmeans, gscales, grot, rng.uniform(0.9, 1.0, size=n_ground), gsh, False)

    # --- decoy blob (second class): cool blue box --------------------------
    n_decoy = 50
    decoy_center = np.array([-2.3, 1.7, 0.0])
    decoy = decoy_center + rng.uniform([-0.9, -0.45, 0.06], [0.9, 0.45, 0.7],
                                       size=(n_decoy, 3))
    decoy_start = sum(len(m) for m in means)
    add(decoy, rng.uniform(0.10, 0.20, size=(n_decoy, 3)), _random_rotations(rng, n_decoy),
        rng.uniform(0.85, 0.95, size=n_decoy),
        _colored(rng, n_decoy, (0.12, 0.25, 0.80), 0.05), False)

    # --- scattered clutter away from both blobs ----------------------------
    n_clutter = 70
    pts = []
    while len(pts) < n_clutter:
        p = rng.uniform([-3.3, -3.3], [3.3, 3.3], size=2)
        if np.linalg.norm(p) < 2.0 or np.linalg.norm(p - decoy_center[:2]) < 1.4:
            continue
        pts.append(p)
    cxy = np.asarray(pts)
    cmeans = np.concatenate([cxy, rng.uniform(0.02, 0.25, size=(n_clutter, 1))], axis=1)
    csh = np.where((rng.random(n_clutter) < 0.5)[:, None, None],
                   _colored(rng, n_clutter, (0.45, 0.45, 0.42), 0.08),
                   _colored(rng, n_clutter, (0.25, 0.40, 0.20), 0.08))
    add(cmeans, rng.uniform(0.08, 0.22, size=(n_clutter, 3)),
        _random_rotations(rng, n_clutter), rng.uniform(0.8, 0.95, size=n_clutter),
        csh, False)

    scene = GaussianScene(
        means=np.concatenate(means).astype(np.float32),
        scales=np.concatenate(scales).astype(np.float32),
        rotations=np.concatenate(rotations).astype(np.float32),
        opacities=np.concatenate(opacities).astype(np.float32),
        sh=np.concatenate(shs).astype(np.float32),
        is_object=np.concatenate(flags),
        background_color=(0.55, 0.70, 0.90),
    )
    info = {
        "n_object": n_body + n_cabin,
        "decoy_indices": np.arange(decoy_start, decoy_start + n_decoy),
        "decoy_class_id": 1,
        "seed": seed,
    }
    return scene, info


def toy_intrinsics(size: int = TOY_IMAGE_SIZE) -> Intrinsics:
    return Intrinsics.from_fov(size, size, TOY_FOV_DEG)


def toy_view_grid(azimuth_offset: float = 0.0, size: int = TOY_IMAGE_SIZE) -> ViewGrid:
    """The standard evaluation/training grid (216 views at offset 0); an
    offset of half the step gives the interleaved held-out grid."""
    return ViewGrid(
        distances=TOY_DISTANCES,
        pitches=TOY_PITCHES,
        azimuth_step=TOY_AZIMUTH_STEP,
        intrinsics=toy_intrinsics(size),
        target_center=TOY_TARGET_CENTER,
        azimuth_offset=azimuth_offset,
    )
