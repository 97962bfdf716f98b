"""Anchor-grid convolutional detector with exact reverse-mode gradients.

A deliberately small single-scale detector: a few strided conv stages (tanh
by default) followed by a linear 1x1 head that predicts, per grid cell and
anchor, box offsets (tx, ty, tw, th) and independent per-class logits.
Confidences are sigmoids of the logits; boxes decode YOLO-style
(cx = (col + sigmoid(tx)) * stride, w = anchor_w * exp(tw)).

Everything — forward, input gradients, parameter gradients — is implemented
in numpy with float64 precision, so inference is bit-deterministic for fixed
weights/input/thread count and gradients match central finite differences to
roundoff.  Raw mode returns every anchor candidate and is the only
differentiable surface; eval mode applies a strict ``conf > threshold`` cut
and per-class greedy NMS and is not differentiable.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (InvalidParameterError, NotDifferentiableError, ParseError,
                     SchemaError, TrainingFailedError)

_WEIGHTS_MAGIC = b"SCDT"
_WEIGHTS_VERSION = 1


# ---------------------------------------------------------------------------
# Boxes and IoU


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, corners (xmin, ymin) to (xmax, ymax)."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError(f"box coordinates must be finite, got {vals}")
        if self.xmax < self.xmin or self.ymax < self.ymin:
            raise InvalidParameterError(f"box corners must be ordered, got {vals}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: int


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; zero-area pairs score 0 by convention."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_array(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """IoU of (N, 4) xyxy boxes against one reference box."""
    ix = np.minimum(boxes[:, 2], ref[2]) - np.maximum(boxes[:, 0], ref[0])
    iy = np.minimum(boxes[:, 3], ref[3]) - np.maximum(boxes[:, 1], ref[1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area = np.clip(boxes[:, 2] - boxes[:, 0], 0.0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0.0, None)
    ref_area = max((ref[2] - ref[0]) * (ref[3] - ref[1]), 0.0)
    union = area + ref_area - inter
    out = np.zeros(len(boxes))
    ok = union > 0.0
    out[ok] = inter[ok] / union[ok]
    return out


# ---------------------------------------------------------------------------
# Architecture and model


@dataclass(frozen=True)
class DetectorArch:
    in_channels: int = 3
    stage_channels: tuple = (16, 32, 32, 32)
    stage_strides: tuple = (2, 2, 2, 1)
    kernel_size: int = 3
    activation: str = "tanh"  # "tanh" or "identity"
    anchors: tuple = ((14.0, 14.0), (26.0, 26.0))  # (w, h) in pixels
    num_classes: int = 2

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise InvalidParameterError("stage_channels and stage_strides must have equal length")
        if len(self.stage_channels) > 4:
            raise InvalidParameterError("at most 4 feature stages (plus the head) are supported")
        if self.activation not in ("tanh", "identity"):
            raise InvalidParameterError(f"unknown activation {self.activation!r}")
        if self.num_classes < 1 or len(self.anchors) < 1:
            raise InvalidParameterError("need at least one class and one anchor")

    @property
    def stride(self) -> int:
        s = 1
        for st in self.stage_strides:
            s *= int(st)
        return s

    @property
    def head_channels(self) -> int:
        return len(self.anchors) * (4 + self.num_classes)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "stage_strides": list(self.stage_strides),
            "kernel_size": self.kernel_size,
            "activation": self.activation,
            "anchors": [list(a) for a in self.anchors],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorArch":
        return cls(
            in_channels=int(d["in_channels"]),
            stage_channels=tuple(int(c) for c in d["stage_channels"]),
            stage_strides=tuple(int(s) for s in d["stage_strides"]),
            kernel_size=int(d["kernel_size"]),
            activation=str(d["activation"]),
            anchors=tuple(tuple(float(v) for v in a) for a in d["anchors"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass
class DetectorModel:
    arch: DetectorArch
    weights: list  # [(W (Cout, Cin, kh, kw), b (Cout,)) per layer, head last]
    score_threshold: float = 0.5
    nms_iou: float = 0.5

    @property
    def stride(self) -> int:
        return self.arch.stride

    def copy(self) -> "DetectorModel":
        return DetectorModel(arch=self.arch,
                             weights=[(w.copy(), b.copy()) for w, b in self.weights],
                             score_threshold=self.score_threshold, nms_iou=self.nms_iou)

    @classmethod
    def initialize(cls, arch: DetectorArch = DetectorArch(), seed: int = 0,
                   zero: bool = False) -> "DetectorModel":
        """Xavier-initialized model (or all-zero weights with ``zero=True``)."""
        rng = np.random.default_rng(seed)
        weights = []
        cin = arch.in_channels
        k = arch.kernel_size
        for cout in arch.stage_channels:
            if zero:
                w = np.zeros((cout, cin, k, k))
            else:
                std = math.sqrt(1.0 / (cin * k * k))
                w = rng.normal(0.0, std, size=(cout, cin, k, k))
            weights.append((w, np.zeros(cout)))
            cin = cout
        head = np.zeros((arch.head_channels, cin, 1, 1))
        if not zero:
            std = math.sqrt(1.0 / cin)
            head = rng.normal(0.0, std, size=head.shape) * 0.1
        head_b = np.zeros(arch.head_channels)
        if not zero:
            # Start class confidences low so negatives dominate early training.
            per = 4 + arch.num_classes
            for a in range(len(arch.anchors)):
                head_b[a * per + 4: (a + 1) * per] = -2.0
        weights.append((head, head_b))
        return cls(arch=arch, weights=weights)


class RawDetections:
    """Every anchor candidate of one image, in (row, col, anchor) order.

    ``conf`` are sigmoid class scores, ``logits`` the pre-sigmoid values;
    ``boxes`` are decoded xyxy pixels.  Detached arrays — gradients flow via
    :func:`input_gradient` selectors, not through this object.
    """

    __slots__ = ("boxes", "conf", "logits", "cells", "anchor_ids", "grid_shape", "image_shape")

    def __init__(self, boxes, conf, logits, cells, anchor_ids, grid_shape, image_shape):
        self.boxes = boxes
        self.conf = conf
        self.logits = logits
        self.cells = cells
        self.anchor_ids = anchor_ids
        self.grid_shape = grid_shape
        self.image_shape = image_shape

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def to_detections(self, class_id: int) -> list:
        return [Detection(bbox=BBox(*self.boxes[i]), class_id=class_id,
                          confidence=float(self.conf[i, class_id]))
                for i in range(len(self))]


@dataclass
class RawGrad:
    """Upstream gradient w.r.t. raw detector outputs.

    Either (or both) of ``d_conf`` / ``d_logits`` may be set, each (N, C).
    Box coordinates carry no gradient path by design.
    """

    d_conf: Optional[np.ndarray] = None
    d_logits: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Conv plumbing (float64, im2col)


def _conv_forward(x, w, b, stride, pad):
    cout, cin, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T + b
    return out.reshape(ho, wo, cout).transpose(2, 0, 1), cols


def _conv_backward(d_out, cols, x_shape, w, stride, pad):
    cout, cin, kh, kw = w.shape
    _, h, width = x_shape
    ho, wo = d_out.shape[1], d_out.shape[2]
    d_flat = d_out.transpose(1, 2, 0).reshape(ho * wo, cout)
    d_w = (d_flat.T @ cols).reshape(w.shape)
    d_b = d_flat.sum(axis=0)
    d_cols = d_flat @ w.reshape(cout, -1)
    d_win = d_cols.reshape(ho, wo, cin, kh, kw).transpose(2, 0, 1, 3, 4)
    d_xp = np.zeros((cin, h + 2 * pad, width + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            d_xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += d_win[:, :, :, i, j]
    d_x = d_xp[:, pad:pad + h, pad:pad + width] if pad else d_xp
    return d_x, d_w, d_b


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_features(model: DetectorModel, image: np.ndarray, keep_ctx: bool):
    """Image (H, W, 3) -> head map (head_channels, Hg, Wg) [+ layer contexts]."""
    arch = model.arch
    x = np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1))
    ctx = []
    pad = arch.kernel_size // 2
    for li, (w, b) in enumerate(model.weights[:-1]):
        z, cols = _conv_forward(x, w, b, arch.stage_strides[li], pad)
        a = np.tanh(z) if arch.activation == "tanh" else z
        if keep_ctx:
            ctx.append((x.shape, cols, a))
        x = a
    w, b = model.weights[-1]
    head, cols = _conv_forward(x, w, b, 1, 0)
    if keep_ctx:
        ctx.append((x.shape, cols, None))
    return (head, ctx) if keep_ctx else head


def _backward_features(model: DetectorModel, d_head: np.ndarray, ctx,
                       want_input: bool, want_params: bool):
    arch = model.arch
    pad = arch.kernel_size // 2
    param_grads = [None] * len(model.weights)

    x_shape, cols, _ = ctx[-1]
    d_x, d_w, d_b = _conv_backward(d_head, cols, x_shape, model.weights[-1][0], 1, 0)
    if want_params:
        param_grads[-1] = (d_w, d_b)

    for li in range(len(model.weights) - 2, -1, -1):
        x_shape, cols, act = ctx[li]
        if arch.activation == "tanh":
            d_x = d_x * (1.0 - act * act)
        d_x, d_w, d_b = _conv_backward(d_x, cols, x_shape, model.weights[li][0],
                                       arch.stage_strides[li], pad)
        if want_params:
            param_grads[li] = (d_w, d_b)

    d_image = d_x.transpose(1, 2, 0) if want_input else None
    return d_image, param_grads


def _check_image(model: DetectorModel, image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != model.arch.in_channels:
        raise InvalidParameterError(
            f"image must be (H, W, {model.arch.in_channels}), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("image must be finite")
    s = model.stride
    if arr.shape[0] % s or arr.shape[1] % s:
        raise InvalidParameterError(
            f"image dimensions {arr.shape[:2]} must be divisible by the model stride {s}")
    if arr.shape[0] < s or arr.shape[1] < s:
        raise InvalidParameterError("image is smaller than one grid cell")
    return arr


def _decode(model: DetectorModel, head: np.ndarray, image_shape) -> RawDetections:
    arch = model.arch
    stride = model.stride
    n_anchor = len(arch.anchors)
    per = 4 + arch.num_classes
    hg, wg = head.shape[1], head.shape[2]
    # (Hg, Wg, A, per) with candidate order (row, col, anchor).
    maps = head.reshape(n_anchor, per, hg, wg).transpose(2, 3, 0, 1)
    flat = maps.reshape(-1, per)

    rows, cols_, anchors_ = np.meshgrid(np.arange(hg), np.arange(wg), np.arange(n_anchor),
                                        indexing="ij")
    rows = rows.reshape(-1)
    cols_ = cols_.reshape(-1)
    anchors_ = anchors_.reshape(-1)

    aw = np.array([a[0] for a in arch.anchors])[anchors_]
    ah = np.array([a[1] for a in arch.anchors])[anchors_]
    cx = (cols_ + _sigmoid(flat[:, 0])) * stride
    cy = (rows + _sigmoid(flat[:, 1])) * stride
    bw = aw * np.exp(flat[:, 2])
    bh = ah * np.exp(flat[:, 3])
    boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)

    logits = flat[:, 4:]
    return RawDetections(boxes=boxes, conf=_sigmoid(logits), logits=logits,
                         cells=np.stack([rows, cols_], axis=1), anchor_ids=anchors_,
                         grid_shape=(hg, wg), image_shape=tuple(image_shape[:2]))


def detect(model: DetectorModel, image, mode: str = "raw"):
    """Run the detector.

    ``raw`` returns a :class:`RawDetections` with every anchor candidate.
    ``eval`` applies a strict ``conf > score_threshold`` cut and per-class
    greedy NMS (suppress IoU > nms_iou) and returns a list of
    :class:`Detection`, sorted by confidence descending.
    """
    if mode not in ("raw", "eval"):
        raise InvalidParameterError(f"mode must be 'raw' or 'eval', got {mode!r}")
    arr = _check_image(model, image)
    head = _forward_features(model, arr, keep_ctx=False)
    raw = _decode(model, head, arr.shape)
    if mode == "raw":
        return raw

    results = []
    for c in range(model.arch.num_classes):
        confs = raw.conf[:, c]
        cand = np.flatnonzero(confs > model.score_threshold)
        if cand.size == 0:
            continue
        order = cand[np.lexsort((cand, -confs[cand]))]
        kept = []
        for i in order:
            box_i = raw.boxes[i]
            if any(iou_array(box_i[None, :], raw.boxes[j])[0] > model.nms_iou for j in kept):
                continue
            kept.append(i)
        for i in kept:
            results.append(Detection(bbox=BBox(*raw.boxes[i]), class_id=c,
                                     confidence=float(confs[i])))
    results.sort(key=lambda d: (-d.confidence, d.class_id))
    return results


def input_gradient(model: DetectorModel, image, loss_selector: Callable,
                   mode: str = "raw"):
    """Exact gradient of a scalar raw-detection loss w.r.t. the input image.

    ``loss_selector(raw) -> (value, RawGrad)`` defines the scalar; returns
    ``(value, grad)`` with ``grad`` shaped like the image.  Only raw mode is
    differentiable — the eval path (threshold + NMS) raises.
    """
    if mode == "eval":
        raise NotDifferentiableError("eval-mode output (threshold + NMS) is not differentiable")
    if mode != "raw":
        raise InvalidParameterError(f"mode must be 'raw' or 'eval', got {mode!r}")
    arr = _check_image(model, image)
    head, ctx = _forward_features(model, arr, keep_ctx=True)
    raw = _decode(model, head, arr.shape)
    value, upstream = loss_selector(raw)
    if not isinstance(upstream, RawGrad):
        raise InvalidParameterError("loss_selector must return (value, RawGrad)")

    n = len(raw)
    c = model.arch.num_classes
    d_logits = np.zeros((n, c))
    if upstream.d_logits is not None:
        d_logits += np.asarray(upstream.d_logits, dtype=np.float64).reshape(n, c)
    if upstream.d_conf is not None:
        d_conf = np.asarray(upstream.d_conf, dtype=np.float64).reshape(n, c)
        d_logits += d_conf * raw.conf * (1.0 - raw.conf)

    n_anchor = len(model.arch.anchors)
    per = 4 + c
    hg, wg = raw.grid_shape
    d_maps = np.zeros((hg, wg, n_anchor, per))
    d_maps[:, :, :, 4:] = d_logits.reshape(hg, wg, n_anchor, c)
    d_head = d_maps.transpose(2, 3, 0, 1).reshape(n_anchor * per, hg, wg)

    d_image, _ = _backward_features(model, d_head, ctx, want_input=True, want_params=False)
    return float(value), d_image


# ---------------------------------------------------------------------------
# Persistence


def save_detector(model: DetectorModel, path) -> None:
    """Versioned binary weight file with a JSON architecture header."""
    arrays = []
    manifest = []
    for li, (w, b) in enumerate(model.weights):
        manifest.append({"name": f"layer{li}.w", "shape": list(w.shape)})
        arrays.append(np.ascontiguousarray(w, dtype="<f8"))
        manifest.append({"name": f"layer{li}.b", "shape": list(b.shape)})
        arrays.append(np.ascontiguousarray(b, dtype="<f8"))
    header = json.dumps({
        "arch": model.arch.to_dict(),
        "score_threshold": model.score_threshold,
        "nms_iou": model.nms_iou,
        "arrays": manifest,
    }, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", _WEIGHTS_VERSION, len(header)))
        fh.write(header)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_detector(path) -> DetectorModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _WEIGHTS_MAGIC:
        raise ParseError("not a detector weight file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _WEIGHTS_VERSION:
        raise SchemaError(f"unsupported weight file version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt weight file header: {e}") from e
    for key in ("arch", "arrays", "score_threshold", "nms_iou"):
        if key not in header:
            raise SchemaError(f"weight file header missing {key!r}")
    arch = DetectorArch.from_dict(header["arch"])
    offset = 12 + hlen
    flat = {}
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ParseError("weight file payload truncated")
        flat[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count,
                                            offset=offset).reshape(shape).copy()
        offset = end
    weights = []
    n_layers = len(arch.stage_channels) + 1
    for li in range(n_layers):
        try:
            weights.append((flat[f"layer{li}.w"], flat[f"layer{li}.b"]))
        except KeyError as e:
            raise SchemaError(f"weight file missing array for layer {li}") from e
    return DetectorModel(arch=arch, weights=weights,
                         score_threshold=float(header["score_threshold"]),
                         nms_iou=float(header["nms_iou"]))


# ---------------------------------------------------------------------------
# Training


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    ground_truths: list  # list[GroundTruth]


@dataclass
class TrainConfig:
    seed: int = 0
    learning_rate: float = 3e-3
    batch_size: int = 16
    max_steps: int = 1500
    min_steps: int = 200
    eval_every: int = 50
    target_ap: float = 0.9
    required_ap: float = 0.85
    val_fraction: float = 0.2
    w_box: float = 2.0
    w_negative: float = 0.5
    ignore_iou: float = 0.5
    target_class: int = 0


def _assign_targets(arch: DetectorArch, stride: int, grid_shape, gts):
    """Per-image positive assignments and the negative-ignore mask."""
    hg, wg = grid_shape
    n_anchor = len(arch.anchors)
    positives = []  # (row, col, anchor, tx*, ty*, tw*, th*, class)
    ignore = np.zeros((hg, wg, n_anchor), dtype=bool)
    cell_cx = (np.arange(wg) + 0.5) * stride
    cell_cy = (np.arange(hg) + 0.5) * stride
    for gt in gts:
        g = gt.bbox
        gcx, gcy = 0.5 * (g.xmin + g.xmax), 0.5 * (g.ymin + g.ymax)
        gw, gh = g.xmax - g.xmin, g.ymax - g.ymin
        if gw <= 0 or gh <= 0:
            continue
        col = min(max(int(gcx / stride), 0), wg - 1)
        row = min(max(int(gcy / stride), 0), hg - 1)
        best_a, best_iou = 0, -1.0
        for a, (aw, ah) in enumerate(arch.anchors):
            inter = min(aw, gw) * min(ah, gh)
            union = aw * ah + gw * gh - inter
            v = inter / union
            if v > best_iou:
                best_a, best_iou = a, v
        tx = min(max(gcx / stride - col, 1e-4), 1 - 1e-4)
        ty = min(max(gcy / stride - row, 1e-4), 1 - 1e-4)
        tw = math.log(gw / arch.anchors[best_a][0])
        th = math.log(gh / arch.anchors[best_a][1])
        positives.append((row, col, best_a, tx, ty, tw, th, gt.class_id))
        # Ignore anchors whose prior box at its own cell overlaps this gt well.
        for a, (aw, ah) in enumerate(arch.anchors):
            px0 = cell_cx[None, :] - aw / 2
            px1 = cell_cx[None, :] + aw / 2
            py0 = cell_cy[:, None] - ah / 2
            py1 = cell_cy[:, None] + ah / 2
            ix = np.clip(np.minimum(px1, g.xmax) - np.maximum(px0, g.xmin), 0, None)
            iy = np.clip(np.minimum(py1, g.ymax) - np.maximum(py0, g.ymin), 0, None)
            inter = ix * iy
            union = aw * ah + g.area - inter
            ignore[:, :, a] |= (inter / union) > 0.5
    return positives, ignore


def _loss_and_head_grad(model: DetectorModel, head: np.ndarray, gts, cfg: TrainConfig):
    """YOLO-style training loss on the raw head map, with its gradient."""
    arch = model.arch
    stride = model.stride
    n_anchor = len(arch.anchors)
    per = 4 + arch.num_classes
    hg, wg = head.shape[1], head.shape[2]
    maps = head.reshape(n_anchor, per, hg, wg).transpose(2, 3, 0, 1)  # (Hg, Wg, A, per)
    d_maps = np.zeros_like(maps)

    positives, ignore = _assign_targets(arch, stride, (hg, wg), gts)

    logits = maps[:, :, :, 4:]
    conf = _sigmoid(logits)
    # Negative BCE toward 0 everywhere first; positives overwrite below.
    neg_mask = ~ignore
    bce_neg = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    loss = cfg.w_negative * float(bce_neg[neg_mask].sum())
    d_maps[:, :, :, 4:][neg_mask] = cfg.w_negative * conf[neg_mask]

    for row, col, a, tx, ty, tw, th, cls in positives:
        cell = maps[row, col, a]
        d_cell = d_maps[row, col, a]
        sx, sy = _sigmoid(cell[0:1])[0], _sigmoid(cell[1:2])[0]
        loss += cfg.w_box * ((sx - tx) ** 2 + (sy - ty) ** 2
                             + (cell[2] - tw) ** 2 + (cell[3] - th) ** 2)
        d_cell[0] = cfg.w_box * 2.0 * (sx - tx) * sx * (1 - sx)
        d_cell[1] = cfg.w_box * 2.0 * (sy - ty) * sy * (1 - sy)
        d_cell[2] = cfg.w_box * 2.0 * (cell[2] - tw)
        d_cell[3] = cfg.w_box * 2.0 * (cell[3] - th)
        z = cell[4:]
        y = np.zeros(arch.num_classes)
        if 0 <= cls < arch.num_classes:
            y[cls] = 1.0
        bce = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        loss += float(bce.sum())
        d_cell[4:] = _sigmoid(z) - y

    d_head = d_maps.transpose(2, 3, 0, 1).reshape(n_anchor * per, hg, wg)
    return loss, d_head


def _validation_ap(model: DetectorModel, val_set, class_id: int) -> float:
    from .evaluate import ap_at_05  # local import to avoid a module cycle

    dets = [detect(model, li.image, mode="eval") for li in val_set]
    gts = [li.ground_truths for li in val_set]
    if all(len(g) == 0 for g in gts):
        return 0.0
    return ap_at_05(dets, gts, class_id=class_id)


def train_toy_detector(dataset, arch: DetectorArch = DetectorArch(),
                       cfg: TrainConfig = TrainConfig()):
    """Train on labeled images until held-out AP@0.5 clears the bar.

    ``dataset`` is a list of :class:`LabeledImage` (at least 100).  A
    deterministic tail split provides validation.  Returns
    ``(model, report)``; raises :class:`TrainingFailedError` carrying the
    report when the budget runs out below ``cfg.required_ap``.
    """
    dataset = list(dataset)
    if len(dataset) < 100:
        raise InvalidParameterError(f"need at least 100 labeled images, got {len(dataset)}")
    n_val = max(1, int(round(len(dataset) * cfg.val_fraction)))
    # Deterministic interleaved split: every k-th image validates.
    k = max(2, len(dataset) // n_val)
    val_idx = set(range(0, len(dataset), k))
    train_set = [li for i, li in enumerate(dataset) if i not in val_idx]
    val_set = [dataset[i] for i in sorted(val_idx)]

    model = DetectorModel.initialize(arch, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    m_state = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights]
    v_state = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    t0 = time.perf_counter()
    ap_trace = []
    best_ap = 0.0
    step = 0
    while step < cfg.max_steps:
        step += 1
        batch_idx = rng.integers(0, len(train_set), size=cfg.batch_size)
        grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.weights]
        total = 0.0
        for bi in batch_idx:
            li = train_set[bi]
            head, ctx = _forward_features(model, _check_image(model, li.image), keep_ctx=True)
            loss, d_head = _loss_and_head_grad(model, head, li.ground_truths, cfg)
            total += loss
            _, pgrads = _backward_features(model, d_head, ctx, want_input=False, want_params=True)
            for gi, (dw, db) in enumerate(pgrads):
                grads[gi] = (grads[gi][0] + dw, grads[gi][1] + db)
        scale = 1.0 / cfg.batch_size
        bc1 = 1.0 - beta1 ** step
        bc2 = 1.0 - beta2 ** step
        new_weights = []
        for gi, ((w, b), (dw, db)) in enumerate(zip(model.weights, grads)):
            dw, db = dw * scale, db * scale
            mw = m_state[gi][0] * beta1 + dw * (1 - beta1)
            mb = m_state[gi][1] * beta1 + db * (1 - beta1)
            vw = v_state[gi][0] * beta2 + dw * dw * (1 - beta2)
            vb = v_state[gi][1] * beta2 + db * db * (1 - beta2)
            m_state[gi] = (mw, mb)
            v_state[gi] = (vw, vb)
            w = w - cfg.learning_rate * (mw / bc1) / (np.sqrt(vw / bc2) + eps)
            b = b - cfg.learning_rate * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
            new_weights.append((w, b))
        model.weights = new_weights

        if step >= cfg.min_steps and step % cfg.eval_every == 0:
            ap = _validation_ap(model, val_set, cfg.target_class)
            ap_trace.append((step, float(ap)))
            best_ap = max(best_ap, ap)
            if ap >= cfg.target_ap:
                break

    final_ap = _validation_ap(model, val_set, cfg.target_class)
    ap_trace.append((step, float(final_ap)))
    report = {
        "steps": step,
        "final_val_ap": float(final_ap),
        "best_val_ap": float(max(best_ap, final_ap)),
        "ap_trace": ap_trace,
        "train_images": len(train_set),
        "val_images": len(val_set),
        "train_seconds": time.perf_counter() - t0,
        "reached": bool(max(best_ap, final_ap) >= cfg.required_ap),
    }
    if final_ap < cfg.required_ap:
        raise TrainingFailedError(
            f"validation AP@0.5 {final_ap:.3f} below the required {cfg.required_ap} "
            f"after {step} steps", report=report)
    return model, report
