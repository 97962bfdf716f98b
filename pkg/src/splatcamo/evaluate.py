"""Viewpoint grids, AP@0.5, and end-to-end scene/detector evaluation.

The harness renders a scene over an orbit grid (distances x pitches x
azimuths), builds detect images (optionally compositing camouflaged object
pixels onto the original background through the object mask), runs the
detector in eval mode, and reports per-cell and overall AP@0.5 plus per-view
detection dumps sufficient to recompute every aggregate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import CameraView, Intrinsics, make_viewpoint
from .detector import BBox, Detection, DetectorModel, GroundTruth, detect, iou
from .errors import InvalidParameterError
from .render import DEFAULT_MASK_THRESHOLD, composite_detect_image, render, render_object_mask
from .scene import GaussianScene, rgb_to_zero_order

# Global photometric presets approximating bright/overcast capture conditions:
# pixel' = clip(contrast * pixel + brightness).
WEATHER_PRESETS = {
    "sunny": {"contrast": 1.15, "brightness": 0.08},
    "cloudy": {"contrast": 0.8, "brightness": -0.08},
}


# ---------------------------------------------------------------------------
# View grids


@dataclass(frozen=True)
class ViewGrid:
    """Orbit sampling plan: every (distance, pitch, azimuth) combination.

    Azimuths run ``offset, offset+step, ...`` over a full turn, so the step
    must divide 360.  ``azimuth_offset`` rotates the whole ring, which is how
    held-out interleaved grids are built (e.g. same step, offset half a step).
    """

    distances: tuple
    pitches: tuple  # degrees above the horizontal, in (0, 90)
    azimuth_step: float  # degrees
    intrinsics: Intrinsics
    target_center: tuple = (0.0, 0.0, 0.0)
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if len(self.distances) == 0 or len(self.pitches) == 0:
            raise InvalidParameterError("distances and pitches must be non-empty")
        if any(d <= 0 for d in self.distances):
            raise InvalidParameterError("distances must be positive")
        if any(not 0.0 < p < 90.0 for p in self.pitches):
            raise InvalidParameterError("pitches must lie strictly between 0 and 90 degrees")
        if self.azimuth_step <= 0 or abs(360.0 / self.azimuth_step
                                         - round(360.0 / self.azimuth_step)) > 1e-9:
            raise InvalidParameterError(
                f"azimuth_step must evenly divide 360, got {self.azimuth_step}")

    @property
    def azimuths(self) -> tuple:
        n = int(round(360.0 / self.azimuth_step))
        return tuple(self.azimuth_offset + i * self.azimuth_step for i in range(n))

    def view_params(self) -> list:
        """(distance, pitch, azimuth) tuples in lexicographic grid order."""
        return [(d, p, a) for d in self.distances for p in self.pitches
                for a in self.azimuths]

    def __len__(self) -> int:
        return len(self.distances) * len(self.pitches) * len(self.azimuths)

    def to_dict(self) -> dict:
        return {
            "distances": list(self.distances),
            "pitches": list(self.pitches),
            "azimuth_step": self.azimuth_step,
            "azimuth_offset": self.azimuth_offset,
            "target_center": list(self.target_center),
            "intrinsics": self.intrinsics.to_dict(),
        }


def generate_view_grid(grid: ViewGrid) -> list:
    """Cameras for every grid point, in (distance, pitch, azimuth) order."""
    center = np.asarray(grid.target_center, dtype=np.float64)
    return [make_viewpoint(center, d, p, a, grid.intrinsics)
            for d, p, a in grid.view_params()]


# ---------------------------------------------------------------------------
# AP@0.5


def ap_at_05(detections_per_image, gts_per_image, class_id: int = 0) -> float:
    """Average precision at IoU 0.5 for one class, pooled across images.

    Detections sort by confidence descending (ties: image index, then box
    index); greedy matching at IoU >= 0.5 consumes each ground truth at most
    once; AP integrates the precision envelope over all recall points.
    Raises when the class has no ground truth anywhere (AP is undefined).
    """
    if len(detections_per_image) != len(gts_per_image):
        raise InvalidParameterError(
            f"got {len(detections_per_image)} detection lists for "
            f"{len(gts_per_image)} ground-truth lists")
    n_gt = sum(1 for gts in gts_per_image for g in gts if g.class_id == class_id)
    if n_gt == 0:
        raise InvalidParameterError(f"no ground truth for class {class_id}; AP is undefined")

    pool = []
    for img_idx, dets in enumerate(detections_per_image):
        for box_idx, det in enumerate(dets):
            if det.class_id == class_id:
                pool.append((-det.confidence, img_idx, box_idx, det))
    pool.sort(key=lambda t: t[:3])

    matched = [set() for _ in gts_per_image]
    tps = np.zeros(len(pool))
    for rank, (_, img_idx, _, det) in enumerate(pool):
        gts = gts_per_image[img_idx]
        best_iou, best_gt = 0.5, -1
        for gi, gt in enumerate(gts):
            if gt.class_id != class_id or gi in matched[img_idx]:
                continue
            v = iou(det.bbox, gt.bbox)
            if v >= best_iou and (best_gt == -1 or v > best_iou):
                best_iou, best_gt = v, gi
        if best_gt >= 0:
            matched[img_idx].add(best_gt)
            tps[rank] = 1.0

    if len(pool) == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # Precision envelope, integrated over every recall increment.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


# ---------------------------------------------------------------------------
# Ground truth from masks


def bbox_from_mask(mask: np.ndarray, min_pixels: int = 4) -> Optional[BBox]:
    """Tight pixel-aligned box around a boolean mask; None when too small."""
    ys, xs = np.nonzero(mask)
    if ys.size < min_pixels:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def apply_weather(image: np.ndarray, weather: Optional[str]) -> np.ndarray:
    if weather is None:
        return image
    if weather not in WEATHER_PRESETS:
        raise InvalidParameterError(
            f"unknown weather preset {weather!r}; choose from {sorted(WEATHER_PRESETS)}")
    p = WEATHER_PRESETS[weather]
    return np.clip(p["contrast"] * image + p["brightness"], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    """Per-cell and overall AP@0.5 plus per-view dumps that reproduce them."""

    mode: str
    weather: Optional[str]
    overall_ap: float
    detection_rate: float
    per_cell: list  # [{distance, pitch, n_views, ap, detection_rate}]
    per_view: list  # [{distance, pitch, azimuth, gt, detections, detected}]
    config: dict
    scene_hash: str
    no_ground_truth: bool = False
    incomplete: bool = False
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "weather": self.weather,
            "overall_ap": self.overall_ap,
            "detection_rate": self.detection_rate,
            "per_cell": self.per_cell,
            "per_view": self.per_view,
            "config": self.config,
            "scene_hash": self.scene_hash,
            "no_ground_truth": self.no_ground_truth,
            "incomplete": self.incomplete,
            "errors": self.errors,
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def save_csv(self, path) -> None:
        """Per-(distance, pitch) table: one row per grid cell plus a total row."""
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["distance", "pitch", "n_views", "ap_at_05", "detection_rate"])
            for cell in self.per_cell:
                w.writerow([cell["distance"], cell["pitch"], cell["n_views"],
                            f"{cell['ap']:.6f}", f"{cell['detection_rate']:.6f}"])
            w.writerow(["overall", "", len(self.per_view),
                        f"{self.overall_ap:.6f}", f"{self.detection_rate:.6f}"])


def view_records_to_inputs(records) -> tuple:
    """Rebuild (detections_per_image, gts_per_image) from per-view dumps."""
    dets_all, gts_all = [], []
    for rec in records:
        dets = [Detection(bbox=BBox(*d["bbox"]), class_id=int(d["class_id"]),
                          confidence=float(d["confidence"])) for d in rec["detections"]]
        gts = []
        if rec["gt"] is not None:
            gts.append(GroundTruth(bbox=BBox(*rec["gt"]["bbox"]),
                                   class_id=int(rec["gt"]["class_id"])))
        dets_all.append(dets)
        gts_all.append(gts)
    return dets_all, gts_all


def _safe_ap(dets, gts, class_id: int = 0) -> tuple:
    """(ap, had_gt): AP@0.5, or 0.0 when the class has no ground truth."""
    try:
        return ap_at_05(dets, gts, class_id=class_id), True
    except InvalidParameterError:
        return 0.0, False


# ---------------------------------------------------------------------------
# Evaluation orchestrator


def evaluate(scene: GaussianScene, detector: DetectorModel, grid: ViewGrid,
             mode: str = "clean", weather: Optional[str] = None,
             mask_threshold: float = DEFAULT_MASK_THRESHOLD,
             out_dir=None) -> EvalReport:
    """Render every grid view, detect, and score AP@0.5.

    ``clean`` renders the scene with its original (pre-attack) colors.
    ``camouflaged`` composites the current-color render onto the original
    render through the object mask, so only object pixels differ from clean.
    Ground truth is the mask's bounding box (class 0); views where the
    object is invisible contribute no ground truth.  Per-view failures are
    recorded and flagged, never fatal.
    """
    if mode not in ("clean", "camouflaged"):
        raise InvalidParameterError(f"mode must be 'clean' or 'camouflaged', got {mode!r}")
    original = scene.with_original_colors()
    cameras = generate_view_grid(grid)
    params = grid.view_params()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    per_view = []
    dets_per_image = []
    gts_per_image = []
    errors = []
    for idx, (cam, (d, p, a)) in enumerate(zip(cameras, params)):
        try:
            out_orig = render(original, cam)
            mask = out_orig.object_alpha >= mask_threshold
            if mode == "clean":
                image = out_orig.rgb
            else:
                out_camo = render(scene, cam)
                image = composite_detect_image(out_camo.rgb, out_orig.rgb,
                                               mask.astype(np.float64))
            image = apply_weather(image, weather)

            box = bbox_from_mask(mask)
            gts = [GroundTruth(bbox=box, class_id=0)] if box is not None else []
            dets = detect(detector, image, mode="eval")
            detected = any(dt.class_id == 0 and box is not None and iou(dt.bbox, box) >= 0.5
                           for dt in dets)
            if out_dir is not None:
                from .imgio import save_png
                save_png(image, out_dir / f"view_{idx:04d}_d{d:g}_p{p:g}_a{a:g}.png")
        except Exception as e:  # noqa: BLE001 - partial reports are flagged, not fatal
            errors.append({"view": idx, "error": f"{type(e).__name__}: {e}"})
            per_view.append({"distance": d, "pitch": p, "azimuth": a, "gt": None,
                             "detections": [], "detected": False, "failed": True})
            dets_per_image.append([])
            gts_per_image.append([])
            continue

        per_view.append({
            "distance": d, "pitch": p, "azimuth": a,
            "gt": None if box is None else {"bbox": list(box.as_array()), "class_id": 0},
            "detections": [{"bbox": [float(v) for v in dt.bbox.as_array()],
                            "class_id": dt.class_id, "confidence": dt.confidence}
                           for dt in dets],
            "detected": bool(detected),
        })
        dets_per_image.append(dets)
        gts_per_image.append(gts)

    per_cell = []
    for d in grid.distances:
        for p in grid.pitches:
            sel = [i for i, (dd, pp, _) in enumerate(params) if dd == d and pp == p]
            cell_ap, _ = _safe_ap([dets_per_image[i] for i in sel],
                                  [gts_per_image[i] for i in sel])
            rate = float(np.mean([per_view[i]["detected"] for i in sel])) if sel else 0.0
            per_cell.append({"distance": d, "pitch": p, "n_views": len(sel),
                             "ap": cell_ap, "detection_rate": rate})

    overall_ap, had_gt = _safe_ap(dets_per_image, gts_per_image)
    report = EvalReport(
        mode=mode, weather=weather,
        overall_ap=overall_ap,
        detection_rate=float(np.mean([v["detected"] for v in per_view])) if per_view else 0.0,
        per_cell=per_cell, per_view=per_view,
        config={"grid": grid.to_dict(), "mode": mode, "weather": weather,
                "mask_threshold": mask_threshold},
        scene_hash=scene.content_hash(),
        no_ground_truth=not had_gt,
        incomplete=bool(errors), errors=errors,
    )
    return report


def recolor_background(scene: GaussianScene, seed: int) -> GaussianScene:
    """Randomize background colors (flat random RGB), object colors untouched.

    Useful for probing whether a camouflage depends on the background it was
    optimized against.
    """
    out = scene.copy()
    rng = np.random.default_rng(seed)
    bg = ~out.is_object
    colors = rng.uniform(0.0, 1.0, size=(int(bg.sum()), 3))
    out.sh[bg, :, :] = 0.0
    out.sh[bg, :, 0] = rgb_to_zero_order(colors)
    return out
