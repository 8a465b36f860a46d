"""Synthetic multi-annotator corpora.

Scenes are bright axis-aligned rectangles (one intensity per class) on a
noisy dark background. Each simulated annotator sees the true boxes through
an :class:`AnnotatorProfile`: coordinate jitter, dropped boxes, spurious
boxes and class confusion. The exact generating boxes are kept aside as a
truth set for evaluation and are never written into the annotator dataset.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .annotations import (
    ImageRecord,
    LabeledBox,
    MultiAnnotatorDataset,
    load_dataset,
    load_image_pixels,
    read_config,
    save_dataset,
    write_pgm,
)
from .geometry import Box
from .rng import SplitMix64, derive_seed

MIN_SIDE = 2.0
PLACEMENT_RETRIES = 100
OBJECT_GAP = 2  # pixels kept free between drawn objects


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    num_classes: int = 2
    objects_per_image: tuple[int, int] = (1, 3)
    object_size: tuple[int, int] = (10, 24)
    intensity_per_class: tuple[int, ...] = (220, 20)
    background_intensity: int = 110
    background_noise_sigma: float = 8.0

    def __post_init__(self):
        lo, hi = self.objects_per_image
        smin, smax = self.object_size
        if not (0 <= lo <= hi):
            raise ValueError("objects_per_image range is empty")
        if not (1 <= smin <= smax):
            raise ValueError("object_size range is empty")
        if smax > min(self.width, self.height):
            raise ValueError("objects do not fit in the image")
        if len(self.intensity_per_class) != self.num_classes:
            raise ValueError("need one intensity per class")
        if self.background_noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneConfig":
        kw = dict(d)
        for k in ("objects_per_image", "object_size", "intensity_per_class"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class AnnotatorProfile:
    jitter_sigma: float = 0.0
    miss_rate: float = 0.0
    spurious_rate: float = 0.0
    class_confusion: float = 0.0

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.spurious_rate < 0:
            raise ValueError("jitter_sigma and spurious_rate must be non-negative")
        if not (0 <= self.miss_rate <= 1 and 0 <= self.class_confusion <= 1):
            raise ValueError("miss_rate and class_confusion must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


STANDARD_PROFILES = (
    AnnotatorProfile(1.5, 0.1, 0.1),
    AnnotatorProfile(2.5, 0.1, 0.1),
    AnnotatorProfile(3.5, 0.1, 0.1),
)


@dataclass
class Corpus:
    dataset: MultiAnnotatorDataset
    truth: dict[str, list[LabeledBox]]
    pixels: dict[str, np.ndarray] = field(repr=False)
    scene: SceneConfig = field(default_factory=SceneConfig)
    profiles: tuple[AnnotatorProfile, ...] = ()
    seed: int = 0
    test_fraction: float = 0.2

    def ids(self, split: str) -> list[str]:
        return self.dataset.split_ids(split)


def _overlaps(a, b, gap) -> bool:
    return not (
        a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]
    )


def generate_scene(rng_seed: int, cfg: SceneConfig = SceneConfig()):
    """Render one scene; returns ``(uint8 pixels (H, W), true boxes)``."""
    rng = SplitMix64(rng_seed)
    n = rng.integer(*cfg.objects_per_image)
    placed: list[tuple[int, int, int, int, int]] = []
    for _ in range(n):
        cls = rng.integer(0, cfg.num_classes - 1)
        for _attempt in range(PLACEMENT_RETRIES):
            w = rng.integer(*cfg.object_size)
            h = rng.integer(*cfg.object_size)
            x0 = rng.integer(0, cfg.width - w)
            y0 = rng.integer(0, cfg.height - h)
            rect = (x0, y0, x0 + w, y0 + h)
            if not any(_overlaps(rect, p[:4], OBJECT_GAP) for p in placed):
                placed.append((*rect, cls))
                break
        else:
            raise PlacementError(f"could not place object {len(placed) + 1} of {n} without overlap")

    img = np.full((cfg.height, cfg.width), float(cfg.background_intensity))
    for x0, y0, x1, y1, cls in placed:
        img[y0:y1, x0:x1] = cfg.intensity_per_class[cls]
    if cfg.background_noise_sigma > 0:
        img += rng.normals(cfg.width * cfg.height, cfg.background_noise_sigma).reshape(img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes = [LabeledBox(Box(float(x0), float(y0), float(x1), float(y1)), cls, 1.0) for x0, y0, x1, y1, cls in placed]
    return pixels, boxes


def _repair(coords: list[float], width: float, height: float) -> Box:
    x0, y0, x1, y1 = coords
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    if x1 - x0 <= 0:
        cx = 0.5 * (x0 + x1)
        x0, x1 = cx - MIN_SIDE / 2, cx + MIN_SIDE / 2
    if y1 - y0 <= 0:
        cy = 0.5 * (y0 + y1)
        y0, y1 = cy - MIN_SIDE / 2, cy + MIN_SIDE / 2
    x0, x1 = max(x0, 0.0), min(x1, float(width))
    y0, y1 = max(y0, 0.0), min(y1, float(height))
    # pushed out of frame by jitter: rebuild a minimal box on the near edge
    if x1 - x0 <= 0:
        x0 = min(max(x0, 0.0), width - MIN_SIDE)
        x1 = x0 + MIN_SIDE
    if y1 - y0 <= 0:
        y0 = min(max(y0, 0.0), height - MIN_SIDE)
        y1 = y0 + MIN_SIDE
    return Box(x0, y0, x1, y1)


def corrupt_annotations(
    truth: Sequence[LabeledBox],
    profile: AnnotatorProfile,
    width: int,
    height: int,
    rng_seed: int,
    num_classes: int = 2,
    spurious_size: tuple[int, int] = (10, 24),
) -> list[LabeledBox]:
    """One simulated annotator's view of ``truth``."""
    rng = SplitMix64(rng_seed)
    out: list[LabeledBox] = []
    for lb in truth:
        if rng.uniform() < profile.miss_rate:
            continue
        coords = list(lb.box.as_tuple())
        if profile.jitter_sigma > 0:
            coords = [c + rng.normal(profile.jitter_sigma) for c in coords]
            box = _repair(coords, width, height)
        else:
            box = lb.box
        cls = lb.class_id
        if num_classes > 1 and rng.uniform() < profile.class_confusion:
            other = rng.integer(0, num_classes - 2)
            cls = other if other < cls else other + 1
        out.append(LabeledBox(box, cls, lb.score))
    smin, smax = spurious_size
    smax = min(smax, width, height)
    smin = min(smin, smax)
    for _ in range(rng.poisson(profile.spurious_rate)):
        w = rng.integer(smin, smax)
        h = rng.integer(smin, smax)
        x0 = rng.integer(0, width - w)
        y0 = rng.integer(0, height - h)
        cls = rng.integer(0, num_classes - 1)
        out.append(LabeledBox(Box(float(x0), float(y0), float(x0 + w), float(y0 + h)), cls, 1.0))
    return out


def _split_rank(image_id: str) -> int:
    return int.from_bytes(hashlib.sha256(image_id.encode("utf-8")).digest()[:8], "big")


def assign_splits(image_ids: Sequence[str], test_fraction: float) -> dict[str, str]:
    """The ``round(n * test_fraction)`` ids with the smallest hash go to test."""
    n_test = int(round(len(image_ids) * test_fraction))
    ranked = sorted(image_ids, key=lambda i: (_split_rank(i), i))
    test = set(ranked[:n_test])
    return {i: ("test" if i in test else "train") for i in image_ids}


def annotator_ids(n: int) -> list[str]:
    return [f"annotator_{j + 1}" for j in range(n)]


def build_corpus(
    n_images: int,
    scene_cfg: SceneConfig = SceneConfig(),
    profiles: Sequence[AnnotatorProfile] = STANDARD_PROFILES,
    rng_seed: int = 0,
    test_fraction: float = 0.2,
) -> Corpus:
    if not profiles:
        raise ValueError("need at least one annotator profile")
    classes = [f"class_{k}" for k in range(scene_cfg.num_classes)]
    anns = annotator_ids(len(profiles))
    ids = [f"img_{i:05d}" for i in range(n_images)]
    splits = assign_splits(ids, test_fraction)
    images, truth, pixels, annotations = [], {}, {}, {}
    for i, image_id in enumerate(ids):
        grid, boxes = generate_scene(derive_seed(rng_seed, i, 0), scene_cfg)
        pixels[image_id] = grid
        truth[image_id] = boxes
        images.append(
            ImageRecord(image_id, scene_cfg.width, scene_cfg.height, f"images/{image_id}.pgm", splits[image_id])
        )
        for j, (ann, prof) in enumerate(zip(anns, profiles)):
            annotations[(image_id, ann)] = corrupt_annotations(
                boxes,
                prof,
                scene_cfg.width,
                scene_cfg.height,
                derive_seed(rng_seed, i, j + 1),
                scene_cfg.num_classes,
                scene_cfg.object_size,
            )
    ds = MultiAnnotatorDataset(classes, images, anns, annotations)
    return Corpus(ds, truth, pixels, scene_cfg, tuple(profiles), rng_seed, test_fraction)


def truth_dataset(corpus: Corpus) -> MultiAnnotatorDataset:
    anns = {(i, "truth"): list(b) for i, b in corpus.truth.items()}
    return MultiAnnotatorDataset(list(corpus.dataset.classes), list(corpus.dataset.images), ["truth"], anns)


def corpus_config(corpus: Corpus) -> dict:
    return {
        "seed": corpus.seed,
        "n_images": len(corpus.dataset.images),
        "test_fraction": corpus.test_fraction,
        "scene": corpus.scene.to_dict(),
        "profiles": [p.to_dict() for p in corpus.profiles],
    }


def write_corpus(corpus: Corpus, outdir) -> None:
    """Write ``dataset.annjson``, ``truth.annjson`` and ``images/*.pgm``.

    Both annotation files carry the generating config.
    """
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    for rec in corpus.dataset.images:
        write_pgm(outdir / rec.pixel_path, corpus.pixels[rec.image_id])
    cfg = corpus_config(corpus)
    save_dataset(corpus.dataset, outdir / "dataset.annjson", config=cfg)
    save_dataset(truth_dataset(corpus), outdir / "truth.annjson", config=cfg)


def load_corpus(outdir) -> Corpus:
    outdir = Path(outdir)
    ds = load_dataset(outdir / "dataset.annjson")
    truth_ds = load_dataset(outdir / "truth.annjson")
    truth = {r.image_id: truth_ds.boxes(r.image_id, "truth") for r in truth_ds.images}
    pixels = {r.image_id: load_image_pixels(r, outdir) for r in ds.images}
    cfg = read_config(outdir / "dataset.annjson")
    if cfg is None:
        return Corpus(ds, truth, pixels)
    return Corpus(
        ds,
        truth,
        pixels,
        SceneConfig.from_dict(cfg["scene"]),
        tuple(AnnotatorProfile(**p) for p in cfg["profiles"]),
        int(cfg["seed"]),
        float(cfg["test_fraction"]),
    )
