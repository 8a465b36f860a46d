"""Pascal-VOC style detection scoring.

Predictions are matched greedily per (image, class) in descending score
order; a prediction is a true positive when its best still-unmatched ground
truth overlaps it with IoU >= the threshold. AP is the all-point
interpolated area under the precision/recall curve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .annotations import LabeledBox
from .geometry import iou_matrix

# mAP@0.4 reported for the full-scale chest X-ray experiment; kept for reference
REFERENCE_MAP = {
    "Baseline": 0.148,
    "Annotator #1": 0.121,
    "Annotator #2": 0.132,
    "Annotator #3": 0.124,
    "Ensemble": 0.154,
    "Ours": 0.158,
}


@dataclass
class MatchResult:
    """Pooled match records for one class.

    ``scores``/``tp`` are aligned and sorted in ranking order; ``matched_gt``
    holds ``(image_id, gt index)`` or ``None`` per prediction.
    """

    scores: list[float] = field(default_factory=list)
    tp: list[bool] = field(default_factory=list)
    matched_gt: list[tuple[str, int] | None] = field(default_factory=list)
    n_gt: int = 0

    @property
    def fp(self) -> list[bool]:
        return [not t for t in self.tp]


@dataclass
class EvalReport:
    ap: list[float]
    n_gt: list[int]
    mAP: float
    iou_threshold: float
    n_images: int
    n_preds: int
    method: str = ""

    @property
    def n_gts(self) -> int:
        return sum(self.n_gt)


def _rank_key(lb: LabeledBox):
    return (-lb.score, lb.box.as_tuple())


def match_image(preds: Sequence[LabeledBox], gts: Sequence[LabeledBox], iou_threshold: float):
    """Greedy matching for one image and one class.

    Returns ``(ranked preds, tp flags, matched gt index or None)``.
    """
    ranked = sorted(preds, key=_rank_key)
    if not ranked:
        return ranked, [], []
    if not gts:
        return ranked, [False] * len(ranked), [None] * len(ranked)
    ious = iou_matrix(np.array([p.box.as_tuple() for p in ranked]), np.array([g.box.as_tuple() for g in gts]))
    used = np.zeros(len(gts), dtype=bool)
    tp, which = [], []
    for i in range(len(ranked)):
        cand = np.where(used, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            used[j] = True
            tp.append(True)
            which.append(j)
        else:
            tp.append(False)
            which.append(None)
    return ranked, tp, which


def match_predictions(
    preds_by_image: Mapping[str, Sequence[LabeledBox]],
    gts_by_image: Mapping[str, Sequence[LabeledBox]],
    iou_threshold: float,
    class_id: int,
) -> MatchResult:
    """Match one class over every image and pool into a single ranking.

    Pooled ties in score keep image order (the order of ``gts_by_image`` keys
    followed by any prediction-only images) and then per-image rank.
    """
    rows = []
    n_gt = 0
    image_ids = list(gts_by_image) + [i for i in preds_by_image if i not in gts_by_image]
    for image_id in image_ids:
        gts = [g for g in gts_by_image.get(image_id, []) if g.class_id == class_id]
        preds = [p for p in preds_by_image.get(image_id, []) if p.class_id == class_id]
        n_gt += len(gts)
        ranked, tp, which = match_image(preds, gts, iou_threshold)
        for p, t, j in zip(ranked, tp, which):
            rows.append((p.score, t, None if j is None else (image_id, j)))
    # stable sort: ties keep image order then per-image rank
    rows.sort(key=lambda r: -r[0])
    return MatchResult([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], n_gt)


def average_precision(match: MatchResult) -> float:
    """All-point interpolated AP; 0.0 when the class has no ground truth."""
    if match.n_gt == 0 or not match.tp:
        return 0.0
    tp = np.cumsum(np.array(match.tp, dtype=np.float64))
    fp = np.cumsum(~np.array(match.tp, dtype=bool))
    recall = tp / match.n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at(
    preds_by_image: Mapping[str, Sequence[LabeledBox]],
    gts_by_image: Mapping[str, Sequence[LabeledBox]],
    num_classes: int,
    iou_threshold: float = 0.4,
    method: str = "",
) -> EvalReport:
    """Per-class AP and their mean over classes that have ground truth."""
    for boxes in list(preds_by_image.values()) + list(gts_by_image.values()):
        for lb in boxes:
            if not 0 <= lb.class_id < num_classes:
                raise ValueError(f"class id {lb.class_id} outside the {num_classes}-class list")
    aps, n_gts = [], []
    for c in range(num_classes):
        m = match_predictions(preds_by_image, gts_by_image, iou_threshold, c)
        aps.append(average_precision(m))
        n_gts.append(m.n_gt)
    scored = [a for a, n in zip(aps, n_gts) if n > 0]
    mean = float(np.mean(scored)) if scored else 0.0
    n_preds = sum(len(v) for v in preds_by_image.values())
    n_images = len(set(preds_by_image) | set(gts_by_image))
    return EvalReport(aps, n_gts, mean, iou_threshold, n_images, n_preds, method)
