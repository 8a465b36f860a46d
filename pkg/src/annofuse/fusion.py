"""Weighted Boxes Fusion across annotators.

Boxes of one class from every annotator are pooled and scanned in a fixed
total order. Each box joins the first cluster whose current fused box
overlaps it by more than ``iou_threshold``, otherwise it opens a new cluster.
A cluster's fused box is the score-weighted mean of its members, and its
confidence is rescaled by how many of the ``t`` annotators backed it. That
rescaled confidence is the agreement weight used by the weighted loss in
:mod:`annofuse.loss`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotations import ImageRecord, LabeledBox, MultiAnnotatorDataset
from .geometry import Box, InvalidInputError, clip_to_image, iou

CONF_MODES = ("avg", "max")
RESCALE_MODES = ("min_over_t", "n_over_t", "none")


@dataclass(frozen=True)
class WbfConfig:
    iou_threshold: float = 0.55
    conf_mode: str = "avg"
    rescale_mode: str = "min_over_t"
    t_override: int | None = None

    def __post_init__(self):
        if not (0.0 < self.iou_threshold < 1.0):
            raise InvalidInputError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.conf_mode not in CONF_MODES:
            raise InvalidInputError(f"conf_mode must be one of {CONF_MODES}")
        if self.rescale_mode not in RESCALE_MODES:
            raise InvalidInputError(f"rescale_mode must be one of {RESCALE_MODES}")
        if self.t_override is not None and self.t_override < 1:
            raise InvalidInputError("t_override must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "WbfConfig":
        return cls(
            float(d["iou_threshold"]),
            str(d["conf_mode"]),
            str(d["rescale_mode"]),
            None if d.get("t_override") is None else int(d["t_override"]),
        )


@dataclass(frozen=True)
class FusedBox:
    box: Box
    class_id: int
    confidence: float
    support: int
    contributors: tuple[str, ...]

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidInputError(f"confidence {self.confidence} outside [0, 1]")
        if self.support < 1:
            raise InvalidInputError("support must be >= 1")

    def as_labeled(self) -> LabeledBox:
        return LabeledBox(self.box, self.class_id, self.confidence)


@dataclass
class FusedDataset:
    classes: list[str]
    images: list[ImageRecord]
    fused: dict[str, list[FusedBox]]
    config: WbfConfig = field(default_factory=WbfConfig)
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for r in self.images:
            self.fused.setdefault(r.image_id, [])

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, image_ids) -> "FusedDataset":
        keep = set(image_ids)
        images = [r for r in self.images if r.image_id in keep]
        return FusedDataset(
            list(self.classes), images, {r.image_id: list(self.fused[r.image_id]) for r in images}, self.config, self.root
        )


@dataclass
class _Cluster:
    members: list[tuple[float, str, np.ndarray]] = field(default_factory=list)
    box: np.ndarray | None = None
    score: float = 0.0

    def add(self, score: float, annotator: str, coords: np.ndarray, conf_mode: str) -> None:
        self.members.append((score, annotator, coords))
        scores = np.array([m[0] for m in self.members])
        stack = np.stack([m[2] for m in self.members])
        total = scores.sum()
        if total > 0:
            mean = (scores[:, None] * stack).sum(axis=0) / total
        else:
            mean = stack.mean(axis=0)
        # rounding must not leave the members' envelope
        self.box = np.clip(mean, stack.min(axis=0), stack.max(axis=0))
        conf = scores.max() if conf_mode == "max" else scores.mean()
        self.score = float(np.clip(conf, scores.min(), scores.max()))


def _rescale(conf: float, n: int, t: int, mode: str) -> float:
    if mode == "min_over_t":
        return conf * (min(t, n) / t)
    if mode == "n_over_t":
        return min(conf * (n / t), 1.0)
    return conf


def fuse_image(
    boxes_by_annotator: Mapping[str, Sequence[LabeledBox]],
    t: int,
    cfg: WbfConfig = WbfConfig(),
    image_size: tuple[float, float] | None = None,
) -> list[FusedBox]:
    """Fuse one image's annotations into consensus boxes.

    ``t`` is the annotator count used to rescale confidences. When
    ``image_size`` (width, height) is given, fused boxes are clipped to it.
    The result is independent of dict order and of box order within an
    annotator.
    """
    if t < 1:
        raise InvalidInputError(f"annotator count must be >= 1, got {t}")
    pooled: dict[int, list[tuple[float, str, tuple]]] = {}
    for ann, boxes in boxes_by_annotator.items():
        for lb in boxes:
            pooled.setdefault(lb.class_id, []).append((lb.score, str(ann), lb.box.as_tuple()))

    out: list[FusedBox] = []
    for class_id in sorted(pooled):
        entries = sorted(pooled[class_id], key=lambda e: (-e[0], e[1], e[2]))
        clusters: list[_Cluster] = []
        for score, ann, coords in entries:
            b = Box(*coords)
            for cl in clusters:
                if iou(Box(*cl.box), b) > cfg.iou_threshold:
                    cl.add(score, ann, np.array(coords), cfg.conf_mode)
                    break
            else:
                cl = _Cluster()
                cl.add(score, ann, np.array(coords), cfg.conf_mode)
                clusters.append(cl)
        for cl in clusters:
            box = Box(*(float(v) for v in cl.box))
            if image_size is not None:
                box = clip_to_image(box, *image_size)
            n = len(cl.members)
            out.append(
                FusedBox(
                    box,
                    class_id,
                    _rescale(cl.score, n, t, cfg.rescale_mode),
                    n,
                    tuple(sorted({m[1] for m in cl.members})),
                )
            )
    out.sort(key=lambda f: (f.class_id, -f.confidence, f.box.as_tuple()))
    return out


def fuse_dataset(ds: MultiAnnotatorDataset, cfg: WbfConfig = WbfConfig()) -> FusedDataset:
    t = cfg.t_override if cfg.t_override is not None else max(len(ds.annotators), 1)
    fused = {
        r.image_id: fuse_image(ds.by_annotator(r.image_id), t, cfg, (r.width, r.height))
        for r in ds.images
    }
    return FusedDataset(list(ds.classes), list(ds.images), fused, cfg, ds.root)


def single_annotator_labels(ds: MultiAnnotatorDataset, annotator_id: str) -> FusedDataset:
    """Wrap one annotator's boxes as confidence-1.0 fused boxes."""
    fused = {
        r.image_id: [
            FusedBox(lb.box, lb.class_id, 1.0, 1, (annotator_id,)) for lb in ds.boxes(r.image_id, annotator_id)
        ]
        for r in ds.images
    }
    return FusedDataset(list(ds.classes), list(ds.images), fused, WbfConfig(), ds.root)


def pooled_labels(ds: MultiAnnotatorDataset) -> FusedDataset:
    """Union of every annotator's boxes, each at confidence 1.0, no fusion."""
    fused = {
        r.image_id: [
            FusedBox(lb.box, lb.class_id, 1.0, 1, (a,)) for a in ds.annotators for lb in ds.boxes(r.image_id, a)
        ]
        for r in ds.images
    }
    return FusedDataset(list(ds.classes), list(ds.images), fused, WbfConfig(), ds.root)
