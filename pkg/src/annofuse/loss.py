"""Anchor target encoding and the agreement-weighted detection loss.

Per anchor the detection objective is::

    L = L_cls(p, p*) + beta * I(t) * L_loc(t, t*)

with ``L_cls`` softmax cross-entropy over ``K + 1`` classes (index ``K`` is
background), ``L_loc`` smooth-L1 over centre/log-size offsets and ``I(t)``
the gate ``IoU(anchor, matched box) > eta``. The re-weighted variant
multiplies the whole per-anchor term by the fused-box confidence ``c`` of the
anchor's match. Both reduce by the mean over all anchors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .fusion import FusedBox
from .geometry import InvalidInputError, iou_matrix

BACKGROUND_WEIGHT_MODES = ("unit", "mean_c")
VARIANTS = ("eq1", "eq2")


@dataclass(frozen=True)
class LossConfig:
    num_classes: int = 2
    eta: float = 0.5
    beta: float = 1.0
    background_weight_mode: str = "unit"

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise InvalidInputError(f"eta must lie in (0, 1), got {self.eta}")
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if self.background_weight_mode not in BACKGROUND_WEIGHT_MODES:
            raise InvalidInputError(f"background_weight_mode must be one of {BACKGROUND_WEIGHT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LossConfig":
        return cls(int(d["num_classes"]), float(d["eta"]), float(d["beta"]), str(d["background_weight_mode"]))


@dataclass
class AnchorTargets:
    """Per-anchor training targets, one row per anchor.

    ``box_target`` rows are NaN for unmatched anchors.
    """

    anchors: np.ndarray  # (A, 4)
    matched: np.ndarray  # (A,) bool, the I(t) gate
    class_target: np.ndarray  # (A,) int in [0, K]
    box_target: np.ndarray  # (A, 4)
    weight: np.ndarray  # (A,)

    def __len__(self) -> int:
        return len(self.matched)

    @classmethod
    def concat(cls, parts: Sequence["AnchorTargets"]) -> "AnchorTargets":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("anchors", "matched", "class_target", "box_target", "weight")))


@dataclass
class Prediction:
    class_logits: np.ndarray  # (A, K + 1)
    box_offsets: np.ndarray  # (A, 4)


@dataclass
class LossBreakdown:
    total: float
    per_anchor: np.ndarray
    cls: np.ndarray
    loc: np.ndarray


def encode_offsets(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_offsets(anchors: np.ndarray, offsets: np.ndarray, max_log_scale: float = 4.0) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * aw + offsets[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + offsets[:, 1] * ah
    w = aw * np.exp(np.clip(offsets[:, 2], -max_log_scale, max_log_scale))
    h = ah * np.exp(np.clip(offsets[:, 3], -max_log_scale, max_log_scale))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_targets(anchors, fused: Sequence[FusedBox], cfg: LossConfig) -> AnchorTargets:
    """Assign every anchor its max-IoU fused box and gate it at ``eta``.

    Ties in IoU go to the earliest fused box. Matched anchors take the fused
    class, offsets and confidence; the rest become background with weight
    1.0 (``unit``) or the image's mean fused confidence (``mean_c``).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if n == 0:
        raise InvalidInputError("no anchors")
    if np.any(anchors[:, 2] <= anchors[:, 0]) or np.any(anchors[:, 3] <= anchors[:, 1]):
        raise InvalidInputError("anchors must have positive width and height")
    k = cfg.num_classes
    if cfg.background_weight_mode == "mean_c" and fused:
        bg_weight = float(np.mean([f.confidence for f in fused]))
    else:
        bg_weight = 1.0
    matched = np.zeros(n, dtype=bool)
    class_target = np.full(n, k, dtype=np.int64)
    box_target = np.full((n, 4), np.nan)
    weight = np.full(n, bg_weight)
    if fused:
        gt = np.array([f.box.as_tuple() for f in fused])
        if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
            raise InvalidInputError("fused box with zero width or height")
        for f in fused:
            if f.class_id >= k:
                raise InvalidInputError(f"class id {f.class_id} out of range for {k} classes")
        ious = iou_matrix(anchors, gt)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best]
        matched = best_iou > cfg.eta
        idx = np.nonzero(matched)[0]
        if len(idx):
            hit = best[idx]
            class_target[idx] = np.array([fused[j].class_id for j in hit])
            box_target[idx] = encode_offsets(anchors[idx], gt[hit])
            weight[idx] = np.array([fused[j].confidence for j in hit])
    return AnchorTargets(anchors, matched, class_target, box_target, weight)


def _check(pred: Prediction, targets: AnchorTargets, cfg: LossConfig) -> None:
    n = len(targets)
    if pred.class_logits.shape != (n, cfg.num_classes + 1) or pred.box_offsets.shape != (n, 4):
        raise InvalidInputError(
            f"prediction shapes {pred.class_logits.shape}, {pred.box_offsets.shape} do not match {n} anchors"
        )
    if not (np.isfinite(pred.class_logits).all() and np.isfinite(pred.box_offsets).all()):
        raise InvalidInputError("non-finite prediction")
    if not np.isfinite(targets.weight).all():
        raise InvalidInputError("non-finite target weight")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _residual(pred: Prediction, targets: AnchorTargets) -> np.ndarray:
    # unmatched rows hold NaN targets; zero them so the gate multiplies cleanly
    return np.where(targets.matched[:, None], pred.box_offsets - np.nan_to_num(targets.box_target), 0.0)


def _terms(pred: Prediction, targets: AnchorTargets, cfg: LossConfig):
    _check(pred, targets, cfg)
    logp = _log_softmax(pred.class_logits)
    ce = -logp[np.arange(len(targets)), targets.class_target]
    d = _residual(pred, targets)
    ad = np.abs(d)
    sl1 = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum(axis=1)
    loc = cfg.beta * targets.matched.astype(np.float64) * sl1
    return ce, loc


def loss_eq1(pred: Prediction, targets: AnchorTargets, cfg: LossConfig) -> LossBreakdown:
    ce, loc = _terms(pred, targets, cfg)
    per_anchor = ce + loc
    return LossBreakdown(float(np.sum(per_anchor)) / len(per_anchor), per_anchor, ce, loc)


def loss_eq2(pred: Prediction, targets: AnchorTargets, cfg: LossConfig) -> LossBreakdown:
    ce, loc = _terms(pred, targets, cfg)
    per_anchor = targets.weight * (ce + loc)
    return LossBreakdown(float(np.sum(per_anchor)) / len(per_anchor), per_anchor, ce, loc)


def detection_loss(pred, targets, cfg, variant: str = "eq2") -> LossBreakdown:
    if variant == "eq1":
        return loss_eq1(pred, targets, cfg)
    if variant == "eq2":
        return loss_eq2(pred, targets, cfg)
    raise InvalidInputError(f"unknown loss variant {variant!r}")


def loss_gradient(pred: Prediction, targets: AnchorTargets, cfg: LossConfig, variant: str = "eq2"):
    """Analytic gradient of the mean loss.

    Returns ``(d_logits, d_offsets)`` with the shapes of the prediction.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown loss variant {variant!r}")
    _check(pred, targets, cfg)
    n = len(targets)
    scale = np.full(n, 1.0 / n) if variant == "eq1" else targets.weight / n
    logp = _log_softmax(pred.class_logits)
    d_logits = np.exp(logp)
    d_logits[np.arange(n), targets.class_target] -= 1.0
    d_logits *= scale[:, None]
    d = _residual(pred, targets)
    d_sl1 = np.where(np.abs(d) < 1.0, d, np.sign(d))
    d_offsets = (cfg.beta * targets.matched.astype(np.float64) * scale)[:, None] * d_sl1
    return d_logits, d_offsets
