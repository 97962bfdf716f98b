"""Dataset plumbing: posed-image sets and labeled detection datasets.

Two on-disk layouts, both a directory of PNGs plus one JSON manifest:

* posed-image set (reconstruction input) — ``manifest.json`` holds
  ``{"format": "posed-images", "images": [{"file", "camera"}, ...]}`` with
  the full camera (rotation, translation, intrinsics) per image;
* detection dataset (detector training input) — ``manifest.json`` holds
  ``{"format": "detection-dataset", "images": [{"file", "boxes":
  [{"bbox": [xmin, ymin, xmax, ymax], "class_id"}, ...]}, ...]}``.

Builders render a scene over a camera collection; ground-truth boxes come
from rendered object masks (class 0 is the scene's object flag; extra
classes can be defined by explicit Gaussian index sets, e.g. a decoy blob).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .detector import BBox, GroundTruth, LabeledImage
from .errors import InvalidParameterError, SchemaError
from .evaluate import bbox_from_mask
from .camera import CameraView
from .imgio import load_png, save_png
from .reconstruct import PosedImage
from .render import DEFAULT_MASK_THRESHOLD, render, render_object_mask
from .scene import GaussianScene


# ---------------------------------------------------------------------------
# Posed-image sets


def render_posed_images(scene: GaussianScene, cameras) -> list:
    return [PosedImage(image=render(scene, cam).rgb, camera=cam) for cam in cameras]


def save_posed_images(posed, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pi in enumerate(posed):
        name = f"view_{i:04d}.png"
        save_png(pi.image, out_dir / name)
        entries.append({"file": name, "camera": pi.camera.to_dict()})
    manifest = {"format": "posed-images", "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out_dir / "manifest.json"


def load_posed_images(in_dir) -> list:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise InvalidParameterError(f"no manifest.json in {in_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "posed-images":
        raise SchemaError(f"{manifest_path}: expected format 'posed-images', "
                          f"got {manifest.get('format')!r}")
    if "images" not in manifest:
        raise SchemaError(f"{manifest_path}: missing 'images'")
    posed = []
    for entry in manifest["images"]:
        for key in ("file", "camera"):
            if key not in entry:
                raise SchemaError(f"{manifest_path}: image entry missing {key!r}")
        image = load_png(in_dir / entry["file"])
        posed.append(PosedImage(image=image, camera=CameraView.from_dict(entry["camera"])))
    return posed


# ---------------------------------------------------------------------------
# Detection datasets


def build_detection_dataset(scene: GaussianScene, cameras,
                            mask_threshold: float = DEFAULT_MASK_THRESHOLD,
                            extra_class_indices=None) -> list:
    """Render each camera and label it from object masks.

    Class 0 boxes come from the scene's object flags.  ``extra_class_indices``
    maps further class ids to Gaussian index arrays whose rendered masks
    provide those classes' boxes (views where a mask vanishes simply lack
    that box).
    """
    extra = dict(extra_class_indices or {})
    labeled = []
    for cam in cameras:
        out = render(scene, cam)
        gts = []
        box = bbox_from_mask(out.object_alpha >= mask_threshold)
        if box is not None:
            gts.append(GroundTruth(bbox=box, class_id=0))
        for class_id, indices in sorted(extra.items()):
            flags = np.zeros(len(scene), dtype=bool)
            flags[np.asarray(indices, dtype=np.int64)] = True
            mask = render_object_mask(scene, cam, threshold=mask_threshold, flags=flags)
            box = bbox_from_mask(mask)
            if box is not None:
                gts.append(GroundTruth(bbox=box, class_id=int(class_id)))
        labeled.append(LabeledImage(image=out.rgb, ground_truths=gts))
    return labeled


def save_detection_dataset(dataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, li in enumerate(dataset):
        name = f"image_{i:04d}.png"
        save_png(li.image, out_dir / name)
        entries.append({
            "file": name,
            "boxes": [{"bbox": [float(v) for v in gt.bbox.as_array()],
                       "class_id": gt.class_id} for gt in li.ground_truths],
        })
    manifest = {"format": "detection-dataset", "images": entries}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return out_dir / "manifest.json"


def load_detection_dataset(in_dir) -> list:
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise InvalidParameterError(f"no manifest.json in {in_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "detection-dataset":
        raise SchemaError(f"{manifest_path}: expected format 'detection-dataset', "
                          f"got {manifest.get('format')!r}")
    dataset = []
    for entry in manifest.get("images", []):
        if "file" not in entry or "boxes" not in entry:
            raise SchemaError(f"{manifest_path}: image entry missing 'file' or 'boxes'")
        image = load_png(in_dir / entry["file"])
        gts = [GroundTruth(bbox=BBox(*b["bbox"]), class_id=int(b["class_id"]))
               for b in entry["boxes"]]
        dataset.append(LabeledImage(image=image, ground_truths=gts))
    return dataset
