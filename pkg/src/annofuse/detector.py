"""A deliberately small anchor-grid detector.

Every anchor is described by its region of the image resampled to an 8x8
patch; one linear map per anchor size turns that patch into ``K + 1`` class
logits and four box offsets. Training is plain minibatch gradient descent on
:func:`annofuse.loss.loss_eq1` or :func:`annofuse.loss.loss_eq2`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotations import LabeledBox, load_image_pixels
from .fusion import FusedBox, FusedDataset, WbfConfig, fuse_image
from .geometry import Box, InvalidInputError, clip_array, iou_matrix
from .loss import (
    AnchorTargets,
    LossConfig,
    Prediction,
    decode_offsets,
    detection_loss,
    encode_targets,
    loss_gradient,
)
from .rng import SplitMix64

PATCH = 8
FEATURE_DIM = 2 * PATCH * PATCH
CONTRAST_SCALE = 64.0
CONTEXT = 2.0
MODEL_FORMAT = "annofuse-detector"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnchorGrid:
    stride: int = 4
    sizes: tuple[int, ...] = (12, 20, 28)

    def shape(self, width: int, height: int) -> tuple[int, int]:
        return math.ceil(height / self.stride), math.ceil(width / self.stride)

    def count(self, width: int, height: int) -> int:
        rows, cols = self.shape(width, height)
        return rows * cols * len(self.sizes)

    def anchors(self, width: int, height: int) -> np.ndarray:
        """``(A, 4)`` anchors, grouped by size, then row-major over cells."""
        rows, cols = self.shape(width, height)
        cy, cx = np.meshgrid(
            (np.arange(rows) + 0.5) * self.stride, (np.arange(cols) + 0.5) * self.stride, indexing="ij"
        )
        cx, cy = cx.ravel(), cy.ravel()
        blocks = []
        for s in self.sizes:
            half = s / 2.0
            blocks.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
        return clip_array(np.concatenate(blocks), width, height)

    def size_index(self, width: int, height: int) -> np.ndarray:
        rows, cols = self.shape(width, height)
        return np.repeat(np.arange(len(self.sizes)), rows * cols)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 4.0
    seed: int = 0
    loss_variant: str = "eq2"
    # gate at the 0.4 IoU used for scoring; background follows the image's mean c
    loss: LossConfig = field(default_factory=lambda: LossConfig(eta=0.4, background_weight_mode="mean_c"))
    batch: int = 4
    grid: AnchorGrid = field(default_factory=AnchorGrid)

    def __post_init__(self):
        if self.epochs < 1 or not self.learning_rate > 0 or self.batch < 1:
            raise InvalidInputError("epochs, learning_rate and batch must be positive")
        if self.loss_variant not in ("eq1", "eq2"):
            raise InvalidInputError(f"unknown loss variant {self.loss_variant!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["sizes"] = list(self.grid.sizes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(
            int(d["epochs"]),
            float(d["learning_rate"]),
            int(d["seed"]),
            str(d["loss_variant"]),
            LossConfig.from_dict(d["loss"]),
            int(d["batch"]),
            AnchorGrid(int(d["grid"]["stride"]), tuple(int(s) for s in d["grid"]["sizes"])),
        )


def extract_features(pixels: np.ndarray, anchors: np.ndarray, context: float = CONTEXT) -> np.ndarray:
    """Bilinear 8x8 resample around every anchor, plus a bias column.

    The sampled window is the anchor scaled by ``context`` about its centre,
    so the patch also shows the surroundings. Two rectified channels carry
    ``clip(+-(v - median) / 64, 0, 1)``, one for bright and one for dark
    structure; samples outside the image read as 0.
    """
    raw = np.asarray(pixels, dtype=np.float64)
    img = (raw - np.median(raw)) / CONTRAST_SCALE
    h, w = img.shape
    chans = []
    for sign in (1.0, -1.0):
        padded = np.zeros((h + 2, w + 2))
        padded[1:-1, 1:-1] = np.clip(sign * img, 0.0, 1.0)
        chans.append(padded)
    t = ((np.arange(PATCH) + 0.5) / PATCH - 0.5) * context
    cx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    cy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    # pixel-centre coordinates, shifted by one for the zero border
    xs = np.clip(cx[:, None] + t[None, :] * aw[:, None] + 0.5, 0.0, w + 1.0)
    ys = np.clip(cy[:, None] + t[None, :] * ah[:, None] + 0.5, 0.0, h + 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h)
    fx = (xs - x0)[:, None, :]
    fy = (ys - y0)[:, :, None]
    yy0, xx0 = y0[:, :, None], x0[:, None, :]
    parts = []
    for padded in chans:
        top = padded[yy0, xx0] * (1 - fx) + padded[yy0, xx0 + 1] * fx
        bot = padded[yy0 + 1, xx0] * (1 - fx) + padded[yy0 + 1, xx0 + 1] * fx
        parts.append((top * (1 - fy) + bot * fy).reshape(len(anchors), PATCH * PATCH))
    feats = np.concatenate(parts, axis=1)
    return np.concatenate([feats, np.ones((len(anchors), 1))], axis=1)


@dataclass
class DetectorModel:
    num_classes: int
    width: int
    height: int
    grid: AnchorGrid = field(default_factory=AnchorGrid)
    # (num_sizes, FEATURE_DIM + 1, num_classes + 1 + 4)
    weights: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (len(self.grid.sizes), FEATURE_DIM + 1, self.num_classes + 5)
        if self.weights is None:
            self.weights = np.zeros(shape)
        elif self.weights.shape != shape:
            raise InvalidInputError(f"weight shape {self.weights.shape} != {shape}")

    @property
    def anchors(self) -> np.ndarray:
        return self.grid.anchors(self.width, self.height)

    def _by_size(self, arr: np.ndarray) -> np.ndarray:
        # rows are image-major, then size-major within an image
        n_sizes = len(self.grid.sizes)
        g = self.grid.count(self.width, self.height) // n_sizes
        n = arr.shape[0] // (n_sizes * g)
        return arr.reshape(n, n_sizes, g, -1).transpose(1, 0, 2, 3).reshape(n_sizes, n * g, -1)

    def _from_size(self, arr: np.ndarray, n_rows: int) -> np.ndarray:
        n_sizes = len(self.grid.sizes)
        g = self.grid.count(self.width, self.height) // n_sizes
        n = n_rows // (n_sizes * g)
        return arr.reshape(n_sizes, n, g, -1).transpose(1, 0, 2, 3).reshape(n_rows, -1)

    def forward(self, feats: np.ndarray) -> Prediction:
        """Raw outputs for stacked ``(n_images * A, F + 1)`` features."""
        out = self._from_size(np.matmul(self._by_size(feats), self.weights), len(feats))
        k1 = self.num_classes + 1
        return Prediction(out[:, :k1], out[:, k1:])

    def backward(self, feats: np.ndarray, d_logits: np.ndarray, d_offsets: np.ndarray) -> np.ndarray:
        """Weight gradient given output gradients for the same rows."""
        g = self._by_size(np.concatenate([d_logits, d_offsets], axis=1))
        return np.matmul(self._by_size(feats).transpose(0, 2, 1), g)


# ---------------------------------------------------------------------------
# training


def _image_pixels(labels: FusedDataset, pixels: Mapping[str, np.ndarray] | None, image_id: str) -> np.ndarray:
    if pixels is not None and image_id in pixels:
        return pixels[image_id]
    rec = next(r for r in labels.images if r.image_id == image_id)
    return load_image_pixels(rec, labels.root)


def train(
    labels: FusedDataset,
    cfg: TrainConfig = TrainConfig(),
    pixels: Mapping[str, np.ndarray] | None = None,
    image_ids: Sequence[str] | None = None,
    features: Mapping[str, np.ndarray] | None = None,
) -> tuple[DetectorModel, list[float]]:
    """Fit a detector to fused (or wrapped single-annotator) labels.

    ``pixels`` maps image id to grid and falls back to the PGM files named by
    the label set; ``image_ids`` restricts training to a subset and
    ``features`` may carry precomputed :func:`extract_features` output for
    the default grid. Returns the model and the mean loss of every epoch.
    """
    ids = list(image_ids) if image_ids is not None else [r.image_id for r in labels.images]
    if not ids:
        raise TrainingError("empty training set")
    recs = {r.image_id: r for r in labels.images}
    w, h = recs[ids[0]].width, recs[ids[0]].height
    if any((recs[i].width, recs[i].height) != (w, h) for i in ids):
        raise TrainingError("all training images must share one size")
    loss_cfg = cfg.loss
    if loss_cfg.num_classes != labels.num_classes:
        loss_cfg = LossConfig(labels.num_classes, loss_cfg.eta, loss_cfg.beta, loss_cfg.background_weight_mode)
        cfg = TrainConfig(cfg.epochs, cfg.learning_rate, cfg.seed, cfg.loss_variant, loss_cfg, cfg.batch, cfg.grid)

    model = DetectorModel(labels.num_classes, w, h, cfg.grid, config=cfg.to_dict())
    anchors = model.anchors
    if features is None or any(i not in features for i in ids):
        features = {i: extract_features(_image_pixels(labels, pixels, i), anchors) for i in ids}
    targets = {i: encode_targets(anchors, labels.fused.get(i, []), loss_cfg) for i in ids}

    rng = SplitMix64(cfg.seed)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = list(ids)
        for j in range(len(order) - 1, 0, -1):  # Fisher-Yates
            k = rng.integer(0, j)
            order[j], order[k] = order[k], order[j]
        losses = []
        for start in range(0, len(order), cfg.batch):
            chunk = order[start : start + cfg.batch]
            x = np.concatenate([features[i] for i in chunk])
            tg = AnchorTargets.concat([targets[i] for i in chunk])
            pred = model.forward(x)
            if not (np.isfinite(pred.class_logits).all() and np.isfinite(pred.box_offsets).all()):
                raise TrainingError(f"non-finite outputs in epoch {epoch + 1}")
            with np.errstate(over="ignore"):
                loss = detection_loss(pred, tg, loss_cfg, cfg.loss_variant).total
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch + 1}")
            losses.append(loss)
            d_logits, d_offsets = loss_gradient(pred, tg, loss_cfg, cfg.loss_variant)
            model.weights -= cfg.learning_rate * model.backward(x, d_logits, d_offsets)
            if not np.isfinite(model.weights).all():
                raise TrainingError(f"weights diverged in epoch {epoch + 1}")
        trace.append(float(np.mean(losses)))
    return model, trace


# ---------------------------------------------------------------------------
# inference


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order.

    Ties in score are broken by box coordinates, ascending.
    """
    if len(boxes) == 0:
        return []
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], tuple(boxes[i])))
    ious = iou_matrix(boxes, boxes)
    keep: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return keep


def predict(
    model: DetectorModel,
    pixels: np.ndarray,
    score_threshold: float = 0.3,
    nms_iou: float = 0.45,
) -> list[LabeledBox]:
    """Detections for one image, sorted by score descending."""
    pixels = np.asarray(pixels)
    if pixels.shape != (model.height, model.width):
        raise InvalidInputError(
            f"image is {pixels.shape[1]}x{pixels.shape[0]}, model expects {model.width}x{model.height}"
        )
    anchors = model.anchors
    pred = model.forward(extract_features(pixels, anchors))
    logits = pred.class_logits - pred.class_logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    k = model.num_classes
    fg = probs[:, :k]
    cls = np.argmax(fg, axis=1)
    score = fg[np.arange(len(fg)), cls]
    # argmax ties resolve to background
    keep = (score > probs[:, k]) & (score >= score_threshold)
    boxes = clip_array(decode_offsets(anchors, pred.box_offsets), model.width, model.height)
    keep &= (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

    out: list[LabeledBox] = []
    for c in range(k):
        idx = np.nonzero(keep & (cls == c))[0]
        for j in nms(boxes[idx], score[idx], nms_iou):
            i = idx[j]
            out.append(LabeledBox(Box(*(float(v) for v in boxes[i])), c, float(score[i])))
    out.sort(key=lambda lb: (-lb.score, lb.class_id, lb.box.as_tuple()))
    return out


def fuse_ensemble(per_model_predictions: Sequence[Sequence[LabeledBox]], cfg: WbfConfig = WbfConfig()) -> list[LabeledBox]:
    """WBF over several models' detections for one image."""
    if not per_model_predictions:
        raise InvalidInputError("need predictions from at least one model")
    by_model = {f"model_{m:03d}": list(p) for m, p in enumerate(per_model_predictions)}
    fused = fuse_image(by_model, len(per_model_predictions), cfg)
    out = [fb.as_labeled() for fb in fused]
    out.sort(key=lambda lb: (-lb.score, lb.class_id, lb.box.as_tuple()))
    return out


# ---------------------------------------------------------------------------
# serialization


def model_to_json(model: DetectorModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "num_classes": model.num_classes,
        "width": model.width,
        "height": model.height,
        "grid": {"stride": model.grid.stride, "sizes": list(model.grid.sizes)},
        "config": model.config,
        "weights_shape": list(model.weights.shape),
        "weights": [float(v) for v in model.weights.ravel()],
    }


def model_from_json(doc: Mapping) -> DetectorModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a detector model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    weights = np.array(doc["weights"], dtype=np.float64).reshape(doc["weights_shape"])
    grid = AnchorGrid(int(doc["grid"]["stride"]), tuple(int(s) for s in doc["grid"]["sizes"]))
    return DetectorModel(int(doc["num_classes"]), int(doc["width"]), int(doc["height"]), grid, weights, doc["config"])


def save_model(model: DetectorModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_json(model), fh, allow_nan=False)
        fh.write("\n")


def load_model(path) -> DetectorModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(json.load(fh))
