"""Min-max camouflage optimization against a detector.

The optimizer recolors the object Gaussians of a scene (zero-order color
coefficients only — geometry, opacity, and view-dependent terms are never
touched) so that a detector stops finding the object, across a whole set of
viewpoints at once:

* detection loss: confidence of the correct class at the max-IoU raw box;
* an inner I-FGSM ascent crafts a bounded background perturbation that tries
  to *restore* detection, so the camouflage must beat a hardened background;
* expectation-over-transform (random scale/contrast/brightness/noise)
  hardens against capture conditions;
* printability and palette regularizers keep colors physically producible
  and close to the dominant background colors;
* an anchor term bounds how far coefficients drift from their start.

Views are visited strictly in order; already-defeated views are skipped, and
per-view iteration stops early once the hardened composite is undetected.
All randomness flows from one seeded generator, and the append-only log uses
a logical sequence counter, so equal seeds give bit-equal artifacts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .detector import (DetectorModel, GroundTruth, RawDetections, RawGrad,
                       detect, iou, iou_array)
from .detector import input_gradient as detector_input_gradient
from .errors import InvalidParameterError, ParseError, SchemaError
from .render import (DEFAULT_MASK_THRESHOLD, composite_detect_image, render,
                     backward_color_gradient)
from .scene import GaussianScene, zero_order_view


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class EotRanges:
    """Transform ranges: scale/contrast multipliers, brightness shift,
    per-pixel uniform noise amplitude."""

    scale: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    brightness: tuple = (-0.1, 0.1)
    noise: float = 0.02

    def __post_init__(self):
        for name in ("scale", "contrast", "brightness"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise InvalidParameterError(f"eot {name} range must be ordered, got ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise InvalidParameterError("eot scale must stay positive")
        if self.noise < 0:
            raise InvalidParameterError("eot noise amplitude must be >= 0")

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "contrast": list(self.contrast),
                "brightness": list(self.brightness), "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "EotRanges":
        known = {"scale", "contrast", "brightness", "noise"}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown eot keys: {sorted(extra)}")
        kw = {}
        for name in ("scale", "contrast", "brightness"):
            if name in d:
                kw[name] = tuple(float(v) for v in d[name])
        if "noise" in d:
            kw["noise"] = float(d["noise"])
        return cls(**kw)


@dataclass(frozen=True)
class AttackConfig:
    """All knobs of the camouflage run; every default is explicit.

    ``epsilon`` bounds the background perturbation in L-infinity ([0,1] pixel
    units); ``eta`` is the color-coefficient learning rate; ``reg_lambda``
    (JSON key ``"lambda"``) is the single weight shared by the printability,
    palette, and anchor regularizers.
    """

    epsilon: float = 8.0 / 255.0
    eta: float = 0.01
    reg_lambda: float = 0.1
    inner_iters_per_view: int = 10
    bg_steps: int = 8
    bg_step_size: Optional[float] = None  # defaults to epsilon / 4
    outer_epochs: int = 20
    eot: EotRanges = field(default_factory=EotRanges)
    palette_k: int = 4
    success_conf: float = 0.5
    success_iou: float = 0.5
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    rng_seed: int = 0
    printable_colors_path: Optional[str] = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidParameterError("epsilon must be >= 0")
        if self.eta <= 0:
            raise InvalidParameterError("eta must be > 0")
        if self.palette_k < 1:
            raise InvalidParameterError("palette_k must be >= 1")
        if self.inner_iters_per_view < 0 or self.bg_steps < 0 or self.outer_epochs < 1:
            raise InvalidParameterError(
                "inner_iters_per_view/bg_steps must be >= 0 and outer_epochs >= 1")
        if self.bg_step_size is not None and self.bg_step_size < 0:
            raise InvalidParameterError("bg_step_size must be >= 0")

    @property
    def resolved_bg_step_size(self) -> float:
        return self.epsilon / 4.0 if self.bg_step_size is None else self.bg_step_size

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "eta": self.eta,
            "lambda": self.reg_lambda,
            "inner_iters_per_view": self.inner_iters_per_view,
            "bg_steps": self.bg_steps,
            "bg_step_size": self.bg_step_size,
            "outer_epochs": self.outer_epochs,
            "eot": self.eot.to_dict(),
            "palette_k": self.palette_k,
            "success_conf": self.success_conf,
            "success_iou": self.success_iou,
            "mask_threshold": self.mask_threshold,
            "rng_seed": self.rng_seed,
            "printable_colors_path": self.printable_colors_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        known = set(cls().to_dict())
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        renames = {"lambda": "reg_lambda"}
        for key, value in d.items():
            attr = renames.get(key, key)
            if key == "eot":
                kw[attr] = EotRanges.from_dict(value)
            elif key in ("inner_iters_per_view", "bg_steps", "outer_epochs",
                         "palette_k", "rng_seed"):
                kw[attr] = int(value)
            elif key in ("bg_step_size", "printable_colors_path"):
                kw[attr] = None if value is None else (
                    str(value) if key == "printable_colors_path" else float(value))
            else:
                kw[attr] = float(value)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "AttackConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise SchemaError("config file must hold a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Printable colors and palette


def _default_printable_colors() -> np.ndarray:
    """30 swatches striding a 3-bit-per-channel lattice (black through white)."""
    levels = np.linspace(0.0, 1.0, 8)
    n_swatches = 30
    idx = np.round(np.linspace(0, 511, n_swatches)).astype(int)
    r, g, b = idx // 64, (idx // 8) % 8, idx % 8
    return np.stack([levels[r], levels[g], levels[b]], axis=1)


@dataclass(frozen=True)
class PrintableColorSet:
    """Colors a printer can produce; the printability score is zero only on them."""

    colors: np.ndarray  # (P, 3) in [0, 1]

    def __post_init__(self):
        arr = np.asarray(self.colors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise InvalidParameterError("printable colors must be a non-empty (P, 3) array")
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise InvalidParameterError("printable colors must lie in [0, 1]")
        object.__setattr__(self, "colors", arr)

    def __len__(self) -> int:
        return self.colors.shape[0]

    @classmethod
    def default(cls) -> "PrintableColorSet":
        return cls(colors=_default_printable_colors())

    @classmethod
    def from_file(cls, path) -> "PrintableColorSet":
        """One hex color per line (``#RRGGBB`` or ``RRGGBB``); blanks ignored."""
        colors = []
        for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                text = text[1:]
            if len(text) != 6:
                raise ParseError(f"{path}:{ln}: expected RRGGBB hex, got {line.strip()!r}")
            try:
                rgb = [int(text[i:i + 2], 16) / 255.0 for i in (0, 2, 4)]
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: bad hex color {line.strip()!r}") from e
            colors.append(rgb)
        if not colors:
            raise ParseError(f"{path}: no colors found")
        return cls(colors=np.asarray(colors))

    def save(self, path) -> None:
        lines = ["#%02X%02X%02X" % tuple(int(round(255 * v)) for v in c)
                 for c in self.colors]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ColorPalette:
    """Dominant colors of the unmodified background, biggest cluster first."""

    colors: np.ndarray  # (k, 3)
    populations: np.ndarray  # (k,) cluster sizes
    source: str = "background-pixels"

    def __post_init__(self):
        arr = np.asarray(self.colors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise InvalidParameterError("palette must be a non-empty (k, 3) array")
        if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
            raise InvalidParameterError("palette colors must lie in [0, 1]")
        object.__setattr__(self, "colors", np.clip(arr, 0.0, 1.0))
        object.__setattr__(self, "populations",
                           np.asarray(self.populations, dtype=np.int64))

    def __len__(self) -> int:
        return self.colors.shape[0]


def _kmeans(pixels: np.ndarray, k: int, rng: np.random.Generator,
            max_iters: int = 100, tol: float = 1e-5):
    """Plain K-means with distance-weighted (k-means++ style) seeding."""
    n = pixels.shape[0]
    centroids = np.empty((k, 3))
    centroids[0] = pixels[int(rng.integers(n))]
    d2 = np.sum((pixels - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i] = pixels[0]  # fewer distinct colors than centroids
            continue
        centroids[i] = pixels[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((pixels - centroids[i]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = np.sum((pixels[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        moved = 0.0
        for ci in range(k):
            members = pixels[labels == ci]
            if members.shape[0] == 0:
                continue  # empty cluster keeps its previous centroid
            new = members.mean(axis=0)
            moved = max(moved, float(np.abs(new - centroids[ci]).max()))
            centroids[ci] = new
        if moved <= tol:
            break
    return centroids, labels


def build_palette(background_pixels, k: int, rng=None) -> ColorPalette:
    """Cluster background pixels and return the k most populous colors.

    Centroids come from K-means (seeded deterministically from ``rng``,
    at most 100 iterations, tolerance 1e-5) ordered by descending cluster
    population.  Asking for more clusters than distinct colors warns about
    duplicate centroids but still returns k entries.
    """
    pixels = np.asarray(background_pixels, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] < k:
        raise InvalidParameterError(
            f"need at least {k} background pixels to build a {k}-color palette, "
            f"got {pixels.shape[0]}")
    if not np.all(np.isfinite(pixels)):
        raise InvalidParameterError("background pixels must be finite")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(0 if rng is None else int(rng))

    centroids, labels = _kmeans(pixels, k, rng)
    pops = np.bincount(labels, minlength=k)
    order = np.argsort(-pops, kind="stable")
    centroids = centroids[order]
    pops = pops[order]

    rounded = np.round(centroids, 12)
    if len(np.unique(rounded, axis=0)) < k:
        warnings.warn("palette has duplicate centroids: fewer distinct background "
                      "colors than requested clusters", RuntimeWarning, stacklevel=2)
    return ColorPalette(colors=np.clip(centroids, 0.0, 1.0), populations=pops)


def collect_background_pixels(scene: GaussianScene, cameras,
                              mask_threshold: float = DEFAULT_MASK_THRESHOLD,
                              max_pixels: int = 100_000) -> np.ndarray:
    """Pool non-object pixels of every view's render, deterministically
    strided down to at most ``max_pixels``."""
    chunks = []
    for cam in cameras:
        out = render(scene, cam)
        bg = out.object_alpha < mask_threshold
        chunks.append(out.rgb[bg])
    pixels = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    if pixels.shape[0] > max_pixels:
        stride = int(np.ceil(pixels.shape[0] / max_pixels))
        pixels = pixels[::stride]
    return pixels


# ---------------------------------------------------------------------------
# Loss components


def detection_loss(raw_detections, gt):
    """Confidence of the correct class at the raw box best overlapping gt.

    The box is chosen by maximum IoU (ties: lowest box index) — not by
    confidence — so the loss always has a gradient path even when every
    confidence is below the eval threshold.  Lists of (detections, gt) pairs
    sum over images.
    """
    if isinstance(raw_detections, (list, tuple)):
        if not isinstance(gt, (list, tuple)) or len(gt) != len(raw_detections):
            raise InvalidParameterError("batched detection_loss needs one gt per image")
        return float(sum(detection_loss(r, g) for r, g in zip(raw_detections, gt)))
    raw = raw_detections
    if not isinstance(raw, RawDetections):
        raise InvalidParameterError("detection_loss expects raw-mode detections")
    if len(raw) == 0:
        raise InvalidParameterError("detection_loss needs at least one raw detection")
    ious = iou_array(raw.boxes, gt.bbox.as_array())
    m_star = int(np.argmax(ious))  # argmax takes the lowest index on ties
    return float(raw.conf[m_star, gt.class_id])


def detection_loss_selector(gt: GroundTruth) -> Callable:
    """Selector form of :func:`detection_loss` for gradient computation."""

    def selector(raw: RawDetections):
        if len(raw) == 0:
            raise InvalidParameterError("detection_loss needs at least one raw detection")
        ious = iou_array(raw.boxes, gt.bbox.as_array())
        m_star = int(np.argmax(ious))
        d_conf = np.zeros_like(raw.conf)
        d_conf[m_star, gt.class_id] = 1.0
        return float(raw.conf[m_star, gt.class_id]), RawGrad(d_conf=d_conf)

    return selector


def _masked_pixels(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.dtype != bool:
        mask = mask >= 0.5
    if image.ndim != 3 or image.shape[2] != 3 or mask.shape != image.shape[:2]:
        raise InvalidParameterError(
            f"image must be (H, W, 3) with a matching (H, W) mask, got "
            f"{image.shape} and {mask.shape}")
    return image[mask]


def nps(image, mask, printable: PrintableColorSet) -> float:
    """Printability score: per masked pixel, the product over printable
    colors of the RGB distance to each; averaged over masked pixels.

    Zero exactly when every masked pixel sits on a printable color; an empty
    mask scores 0.
    """
    if len(printable) == 0:
        raise InvalidParameterError("printable color set must be non-empty")
    px = _masked_pixels(image, mask)
    if px.shape[0] == 0:
        return 0.0
    d = np.linalg.norm(px[:, None, :] - printable.colors[None, :, :], axis=2)
    return float(np.prod(d, axis=1).mean())


def nps_gradient(image, mask, printable: PrintableColorSet) -> np.ndarray:
    """d(nps)/d(pixel), zero outside the mask.

    At a pixel exactly on a printable color the score sits at its minimum;
    the subgradient is pinned to zero there.
    """
    if len(printable) == 0:
        raise InvalidParameterError("printable color set must be non-empty")
    image = np.asarray(image, dtype=np.float64)
    grad = np.zeros_like(image)
    mask_b = np.asarray(mask)
    if mask_b.dtype != bool:
        mask_b = mask_b >= 0.5
    px = image[mask_b]
    n = px.shape[0]
    if n == 0:
        return grad
    diff = px[:, None, :] - printable.colors[None, :, :]  # (n, P, 3)
    d = np.linalg.norm(diff, axis=2)  # (n, P)
    prod = np.prod(d, axis=1)  # (n,)
    safe = d >= 1e-12
    coeff = np.zeros_like(d)
    np.divide(prod[:, None], d * d, out=coeff, where=safe)
    g = np.einsum("np,npc->nc", coeff, diff) / n
    grad[mask_b] = g
    return grad


def color_regularizer(i_det, mask, palette: ColorPalette) -> float:
    """Mean, over masked pixels, of the distance to the nearest palette color."""
    if len(palette) == 0:
        raise InvalidParameterError("palette must be non-empty")
    px = _masked_pixels(i_det, mask)
    if px.shape[0] == 0:
        return 0.0
    d = np.linalg.norm(px[:, None, :] - palette.colors[None, :, :], axis=2)
    return float(d.min(axis=1).mean())


def color_regularizer_gradient(i_det, mask, palette: ColorPalette) -> np.ndarray:
    """d(color_regularizer)/d(pixel); nearest-color ties take the lowest
    palette index, and an exact palette hit gets subgradient zero."""
    if len(palette) == 0:
        raise InvalidParameterError("palette must be non-empty")
    image = np.asarray(i_det, dtype=np.float64)
    grad = np.zeros_like(image)
    mask_b = np.asarray(mask)
    if mask_b.dtype != bool:
        mask_b = mask_b >= 0.5
    px = image[mask_b]
    n = px.shape[0]
    if n == 0:
        return grad
    diff = px[:, None, :] - palette.colors[None, :, :]
    d = np.linalg.norm(diff, axis=2)
    nearest = np.argmin(d, axis=1)
    dn = d[np.arange(n), nearest]
    g = np.zeros((n, 3))
    ok = dn >= 1e-12
    g[ok] = diff[np.arange(n)[ok], nearest[ok]] / dn[ok, None] / n
    grad[mask_b] = g
    return grad


def anchor_regularizer(k0_now, k0_ori) -> float:
    """Euclidean norm of the drift of all object zero-order coefficients."""
    a = np.asarray(k0_now, dtype=np.float64)
    b = np.asarray(k0_ori, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(
            f"coefficient arrays must have equal shape, got {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def anchor_regularizer_gradient(k0_now, k0_ori) -> np.ndarray:
    a = np.asarray(k0_now, dtype=np.float64)
    b = np.asarray(k0_ori, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(
            f"coefficient arrays must have equal shape, got {a.shape} vs {b.shape}")
    delta = a - b
    norm = float(np.linalg.norm(delta.ravel()))
    if norm < 1e-12:
        return np.zeros_like(delta)
    return delta / norm


# ---------------------------------------------------------------------------
# Expectation over transforms


@dataclass(frozen=True)
class TransformSample:
    """One drawn transform: bilinear center-scale, then contrast, brightness,
    additive noise, and a final clamp to [0, 1].  The noise field is treated
    as a constant in the gradient."""

    scale: float
    contrast: float
    brightness: float
    noise: Optional[np.ndarray] = None  # (H, W, 3) or None

    @classmethod
    def identity(cls) -> "TransformSample":
        return cls(scale=1.0, contrast=1.0, brightness=0.0, noise=None)


def eot_sample(rng: np.random.Generator, ranges: EotRanges, shape) -> TransformSample:
    scale = float(rng.uniform(*ranges.scale))
    contrast = float(rng.uniform(*ranges.contrast))
    brightness = float(rng.uniform(*ranges.brightness))
    noise = None
    if ranges.noise > 0:
        noise = rng.uniform(-ranges.noise, ranges.noise, size=tuple(shape))
    return TransformSample(scale=scale, contrast=contrast, brightness=brightness, noise=noise)


def _bilinear_scale_coords(h: int, w: int, s: float):
    """Edge-clamped source coordinates of a center-anchored rescale; the
    mapping is the exact identity at s = 1."""
    yi = np.clip((np.arange(h) + 0.5 - h / 2.0) / s + h / 2.0 - 0.5, 0.0, h - 1.0)
    xi = np.clip((np.arange(w) + 0.5 - w / 2.0) / s + w / 2.0 - 0.5, 0.0, w - 1.0)
    y0 = np.floor(yi).astype(np.int64)
    x0 = np.floor(xi).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yi - y0
    wx = xi - x0
    return (y0, y1, wy), (x0, x1, wx)


def eot_apply(image: np.ndarray, t: TransformSample) -> np.ndarray:
    out, _ = eot_apply_vjp(image, t)
    return out


def eot_apply_vjp(image: np.ndarray, t: TransformSample):
    """Apply the transform and return (output, vjp) where vjp maps an
    output-space gradient back to the input image exactly (clamped pixels
    pass gradient through only on [0, 1] inclusive; noise contributes none).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidParameterError(f"image must be (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    (y0, y1, wy), (x0, x1, wx) = _bilinear_scale_coords(h, w, t.scale)

    wy_col = wy[:, None, None]
    wx_row = wx[None, :, None]
    scaled = ((1 - wy_col) * (1 - wx_row) * image[np.ix_(y0, x0)]
              + (1 - wy_col) * wx_row * image[np.ix_(y0, x1)]
              + wy_col * (1 - wx_row) * image[np.ix_(y1, x0)]
              + wy_col * wx_row * image[np.ix_(y1, x1)])
    pre = t.contrast * scaled + t.brightness
    if t.noise is not None:
        if t.noise.shape != pre.shape:
            raise InvalidParameterError(
                f"noise shape {t.noise.shape} does not match image {pre.shape}")
        pre = pre + t.noise
    out = np.clip(pre, 0.0, 1.0)
    inside = (pre >= 0.0) & (pre <= 1.0)

    def vjp(d_out: np.ndarray) -> np.ndarray:
        d_pre = np.where(inside, d_out, 0.0) * t.contrast
        d_in = np.zeros_like(image)
        corners = (((1 - wy_col) * (1 - wx_row), y0, x0),
                   ((1 - wy_col) * wx_row, y0, x1),
                   (wy_col * (1 - wx_row), y1, x0),
                   (wy_col * wx_row, y1, x1))
        for weight, ys, xs in corners:
            contrib = weight * d_pre
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            np.add.at(d_in, (yy.ravel(), xx.ravel()),
                      contrib.reshape(-1, 3))
        return d_in

    return out, vjp


# ---------------------------------------------------------------------------
# Per-view state, background perturbation, total loss


@dataclass
class BackgroundPerturbation:
    """Bounded additive noise confined to the background of one view."""

    sigma: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool, True on the object

    def assert_valid(self, epsilon: float) -> None:
        if float(np.abs(self.sigma).max(initial=0.0)) > epsilon + 1e-12:
            raise InvalidParameterError("background perturbation exceeds its budget")
        if self.sigma[self.mask].size and float(np.abs(self.sigma[self.mask]).max()) > 0.0:
            raise InvalidParameterError("background perturbation leaked inside the object mask")

    def linf(self) -> float:
        return float(np.abs(self.sigma).max(initial=0.0))


@dataclass
class ViewState:
    """Cached per-view inputs for the optimization loop."""

    camera: object
    gt: Optional[GroundTruth]
    i_ori: np.ndarray  # original composite (background source), (H, W, 3)
    mask: np.ndarray  # (H, W) bool, True on the object
    view_index: int
    i_det: Optional[np.ndarray] = None  # current composite, refreshed per iteration
    sigma: Optional[BackgroundPerturbation] = None

    @property
    def mask_f(self) -> np.ndarray:
        return self.mask.astype(np.float64)


def _is_detected(detector: DetectorModel, image: np.ndarray, gt: GroundTruth,
                 cfg: AttackConfig) -> bool:
    """Eval-mode success test: any correct-class detection overlapping gt."""
    dets = detect(detector, image, mode="eval")
    return any(d.class_id == gt.class_id and d.confidence >= cfg.success_conf
               and iou(d.bbox, gt.bbox) >= cfg.success_iou for d in dets)


def background_maximize(view_state: ViewState, detector: DetectorModel,
                        gt: GroundTruth, cfg: AttackConfig,
                        instrument: Optional[Callable] = None) -> BackgroundPerturbation:
    """I-FGSM ascent on the detection loss over the background pixels.

    Starting from zero, each step adds ``bg_step_size * sign(grad)`` outside
    the object mask and projects onto the epsilon ball.  The ascent stops as
    soon as the detector (eval mode) correctly finds the object on the
    perturbed composite — the perturbation's whole job is to restore
    detection so the color update must beat a worst-case background.
    """
    if view_state.i_det is None:
        raise InvalidParameterError("view state has no cached composite for this iteration")
    i_det = view_state.i_det
    inv_mask = 1.0 - view_state.mask_f
    sigma = np.zeros_like(i_det)
    selector = detection_loss_selector(gt)
    step = cfg.resolved_bg_step_size
    for _ in range(cfg.bg_steps):
        perturbed = i_det + sigma * inv_mask[:, :, None]
        if _is_detected(detector, perturbed, gt, cfg):
            break
        if cfg.epsilon == 0.0 or step == 0.0:
            break  # nothing to ascend with
        _, d_image = detector_input_gradient(detector, perturbed, selector)
        d_sigma = d_image * inv_mask[:, :, None]
        sigma = np.clip(sigma + step * np.sign(d_sigma), -cfg.epsilon, cfg.epsilon)
        sigma[view_state.mask] = 0.0
        if instrument is not None:
            instrument(sigma=sigma, mask=view_state.mask,
                       meta={"view": view_state.view_index, "stage": "bg-step"})
    out = BackgroundPerturbation(sigma=sigma, mask=view_state.mask)
    out.assert_valid(cfg.epsilon)
    if instrument is not None:
        instrument(sigma=out.sigma, mask=out.mask,
                   meta={"view": view_state.view_index, "stage": "bg-final"})
    return out


@dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    nps: float
    l_clr: float
    anchor: float
    reg_lambda: float
    total: float

    def to_dict(self) -> dict:
        return {"l_det": self.l_det, "nps": self.nps, "l_clr": self.l_clr,
                "anchor": self.anchor, "lambda": self.reg_lambda, "total": self.total}


def _loss_pieces(view_state: ViewState, detector, gt, palette, printable,
                 cfg: AttackConfig, scene: GaussianScene, sample: TransformSample,
                 want_grad: bool, render_out=None):
    """Shared forward (and optional backward) of the full objective."""
    if view_state.i_det is None:
        raise InvalidParameterError("view state has no cached composite for this iteration")
    i_det = view_state.i_det
    mask = view_state.mask
    inv_mask = (1.0 - view_state.mask_f)[:, :, None]
    sigma = (view_state.sigma.sigma if view_state.sigma is not None
             else np.zeros_like(i_det))

    hardened = i_det + sigma * inv_mask
    transformed, vjp = eot_apply_vjp(hardened, sample)
    selector = detection_loss_selector(gt)
    if want_grad:
        l_det, d_transformed = detector_input_gradient(detector, transformed, selector)
    else:
        l_det = detection_loss(detect(detector, transformed, mode="raw"), gt)
        d_transformed = None

    nps_val = nps(i_det, mask, printable)
    clr_val = color_regularizer(i_det, mask, palette)
    zv = zero_order_view(scene)
    anchor_val = anchor_regularizer(zv.get(), zv.original())
    total = l_det + cfg.reg_lambda * (nps_val + clr_val + anchor_val)
    breakdown = LossBreakdown(l_det=float(l_det), nps=nps_val, l_clr=clr_val,
                              anchor=anchor_val, reg_lambda=cfg.reg_lambda,
                              total=float(total))
    if not want_grad:
        return breakdown, None

    if render_out is None or not render_out.has_trace:
        raise InvalidParameterError("gradient computation needs a render with its trace")
    # Chain back to detect-image pixels, then through the mask composite to
    # the rendered object pixels, then to the zero-order coefficients.
    d_i_det = vjp(d_transformed)  # sigma is a constant here
    d_i_det = d_i_det + cfg.reg_lambda * (nps_gradient(i_det, mask, printable)
                                          + color_regularizer_gradient(i_det, mask, palette))
    d_render_rgb = d_i_det * view_state.mask_f[:, :, None]
    grad_k0 = backward_color_gradient(render_out, d_render_rgb)
    grad_k0 = grad_k0 + cfg.reg_lambda * anchor_regularizer_gradient(zv.get(), zv.original())
    return breakdown, grad_k0


def total_loss(view_state: ViewState, detector: DetectorModel, gt: GroundTruth,
               palette: ColorPalette, printable: PrintableColorSet,
               cfg: AttackConfig, scene: GaussianScene,
               sample: Optional[TransformSample] = None,
               rng: Optional[np.random.Generator] = None):
    """Full objective for one view under one transform sample.

    Returns ``(value, LossBreakdown)``.  Pass ``sample`` for a fixed
    transform, or ``rng`` to draw a fresh one.
    """
    if sample is None:
        if rng is None:
            sample = TransformSample.identity()
        else:
            sample = eot_sample(rng, cfg.eot, view_state.i_det.shape)
    breakdown, _ = _loss_pieces(view_state, detector, gt, palette, printable,
                                cfg, scene, sample, want_grad=False)
    return breakdown.total, breakdown


def total_loss_gradient(view_state: ViewState, detector: DetectorModel,
                        gt: GroundTruth, palette: ColorPalette,
                        printable: PrintableColorSet, cfg: AttackConfig,
                        scene: GaussianScene, render_out,
                        sample: TransformSample):
    """(value, breakdown, d(total)/d(object zero-order coefficients))."""
    breakdown, grad = _loss_pieces(view_state, detector, gt, palette, printable,
                                   cfg, scene, sample, want_grad=True,
                                   render_out=render_out)
    return breakdown.total, breakdown, grad


def camouflage_step(scene: GaussianScene, grad_k0: np.ndarray,
                    cfg: AttackConfig) -> GaussianScene:
    """One descent step on the object zero-order coefficients, in place.

    Touches nothing else: geometry, opacity, and higher-order coefficients
    stay bit-identical.  Non-finite gradients abort the step.
    """
    grad = np.asarray(grad_k0, dtype=np.float64)
    zv = zero_order_view(scene)
    if grad.shape != zv.get().shape:
        raise InvalidParameterError(
            f"gradient shape {grad.shape} does not match coefficients {zv.get().shape}")
    if not np.all(np.isfinite(grad)):
        raise InvalidParameterError("non-finite coefficient gradient")
    zv.set(zv.get() - cfg.eta * grad)
    return scene


# ---------------------------------------------------------------------------
# Log


class AttackLog:
    """Append-only NDJSON run log ordered by a logical sequence counter.

    Records carry a monotone ``seq`` field instead of wall-clock timestamps
    so that two runs with equal seeds produce byte-equal logs.
    """

    def __init__(self, header: Optional[dict] = None):
        self.records = []
        if header is not None:
            self.append("header", **header)

    def append(self, event: str, **fields) -> dict:
        record = {"seq": len(self.records), "event": event}
        record.update(fields)
        self.records.append(record)
        return record

    def __len__(self) -> int:
        return len(self.records)

    def events(self, event: str) -> list:
        return [r for r in self.records if r["event"] == event]

    def save(self, path) -> None:
        with open(Path(path), "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AttackLog":
        log = cls()
        for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                log.records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{ln}: bad log record: {e}") from e
        return log


# ---------------------------------------------------------------------------
# Orchestration


def run_attack(scene: GaussianScene, views, detector: DetectorModel,
               gt_per_view, cfg: AttackConfig = AttackConfig(),
               palette: Optional[ColorPalette] = None,
               printable: Optional[PrintableColorSet] = None,
               instrument: Optional[Callable] = None):
    """Optimize the object colors across all views; returns ``(G', log)``.

    The input scene is never modified — the returned scene is a copy whose
    object zero-order coefficients have been optimized.  Views are visited
    strictly in order for ``outer_epochs`` passes.  A view whose unperturbed
    composite is already undetected is skipped; otherwise each inner
    iteration rebuilds the background perturbation from scratch, takes one
    color step against the hardened composite, and the view ends early once
    a full background ascent fails to restore detection.  Per-view errors
    are logged, never fatal.
    """
    views = list(views)
    gt_per_view = list(gt_per_view)
    if len(views) == 0:
        raise InvalidParameterError("need at least one view")
    if len(gt_per_view) != len(views):
        raise InvalidParameterError(
            f"got {len(gt_per_view)} ground truths for {len(views)} views")

    work = scene.copy()
    rng = np.random.default_rng(cfg.rng_seed)
    if printable is None:
        printable = (PrintableColorSet.from_file(cfg.printable_colors_path)
                     if cfg.printable_colors_path else PrintableColorSet.default())

    log = AttackLog(header={
        "config": cfg.to_dict(),
        "n_views": len(views),
        "scene_hash": work.content_hash(),
        "printable_count": len(printable),
    })

    # Cache the original composite and object mask of every view once.
    view_states = []
    for vi, (cam, gt) in enumerate(zip(views, gt_per_view)):
        out = render(work, cam)
        mask = out.object_alpha >= cfg.mask_threshold
        view_states.append(ViewState(camera=cam, gt=gt, i_ori=out.rgb,
                                     mask=mask, view_index=vi))

    if palette is None:
        bg_pixels = np.concatenate(
            [vs.i_ori[~vs.mask] for vs in view_states], axis=0)
        palette = build_palette(bg_pixels, cfg.palette_k, rng)
    log.append("palette", colors=[[float(v) for v in c] for c in palette.colors],
               populations=[int(p) for p in palette.populations])

    if work.num_objects == 0:
        log.append("done", epochs_run=0, reason="no-object-gaussians")
        return work, log

    stop_reason = "epoch-budget-exhausted"
    epochs_run = 0
    for epoch in range(cfg.outer_epochs):
        epochs_run = epoch + 1
        log.append("epoch_start", epoch=epoch)
        processed = 0
        skipped = 0
        for vs in view_states:
            if vs.gt is None:
                skipped += 1
                log.append("view_skip", epoch=epoch, view=vs.view_index,
                           reason="no-ground-truth")
                continue
            plain = render(work, vs.camera)
            vs.i_det = composite_detect_image(plain.rgb, vs.i_ori, vs.mask_f)
            if not _is_detected(detector, vs.i_det, vs.gt, cfg):
                skipped += 1
                log.append("view_skip", epoch=epoch, view=vs.view_index,
                           reason="already-successful")
                continue
            if cfg.inner_iters_per_view == 0:
                processed += 1
                log.append("view_exhausted", epoch=epoch, view=vs.view_index,
                           iterations=0)
                continue
            processed += 1
            succeeded = False
            iters_used = 0
            for it in range(cfg.inner_iters_per_view):
                out = render(work, vs.camera, with_trace=True)
                vs.i_det = composite_detect_image(out.rgb, vs.i_ori, vs.mask_f)
                vs.sigma = background_maximize(vs, detector, vs.gt, cfg,
                                               instrument=instrument)
                hardened = vs.i_det + vs.sigma.sigma * (1.0 - vs.mask_f)[:, :, None]
                if not _is_detected(detector, hardened, vs.gt, cfg):
                    succeeded = True
                    log.append("view_success", epoch=epoch, view=vs.view_index,
                               iterations=iters_used)
                    break
                iters_used = it + 1
                sample = eot_sample(rng, cfg.eot, vs.i_det.shape)
                try:
                    total, breakdown, grad_k0 = total_loss_gradient(
                        vs, detector, vs.gt, palette, printable, cfg, work,
                        render_out=out, sample=sample)
                    camouflage_step(work, grad_k0, cfg)
                except InvalidParameterError as e:
                    log.append("iteration_abort", epoch=epoch, view=vs.view_index,
                               iteration=it, error=str(e))
                    break
                log.append("iteration", epoch=epoch, view=vs.view_index,
                           iteration=it, l_det=breakdown.l_det, nps=breakdown.nps,
                           l_clr=breakdown.l_clr, anchor=breakdown.anchor,
                           total=breakdown.total, sigma_linf=vs.sigma.linf(),
                           success=False)
            vs.sigma = None
            vs.i_det = None
            if not succeeded and cfg.inner_iters_per_view > 0:
                log.append("view_exhausted", epoch=epoch, view=vs.view_index,
                           iterations=iters_used)
        log.append("epoch_end", epoch=epoch, processed=processed, skipped=skipped)
        if processed == 0:
            # Nothing was optimized and nothing consumed randomness, so every
            # later pass would replay this one exactly.
            stop_reason = "all-views-successful"
            break
        if cfg.inner_iters_per_view == 0:
            # No color updates are possible, so later passes change nothing.
            stop_reason = "no-iterations-configured"
            break

    log.append("done", epochs_run=epochs_run, reason=stop_reason)
    return work, log
