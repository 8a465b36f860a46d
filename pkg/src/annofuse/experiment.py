"""The baseline comparison: pooled labels, per-annotator models, their
ensemble, and agreement-weighted training on fused labels.

Each seed builds a fresh synthetic corpus, trains every method on the train
split and scores it at mAP@``map_iou`` against the held-out truth of the
test split.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .detector import TrainConfig, extract_features, fuse_ensemble, predict, train
from .evaluation import REFERENCE_MAP, EvalReport, map_at
from .fusion import WbfConfig, fuse_dataset, pooled_labels, single_annotator_labels
from .simulator import STANDARD_PROFILES, AnnotatorProfile, SceneConfig, build_corpus


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 200
    n_test: int = 50
    scene: SceneConfig = field(default_factory=SceneConfig)
    profiles: tuple[AnnotatorProfile, ...] = STANDARD_PROFILES
    train: TrainConfig = field(default_factory=TrainConfig)
    # 0.55 splits one object's jittered boxes into several clusters
    wbf: WbfConfig = field(default_factory=lambda: WbfConfig(iou_threshold=0.4))
    map_iou: float = 0.4
    score_threshold: float = 0.3
    nms_iou: float = 0.45
    # loss used for the fused-label arm; eq1 gives the unweighted ablation
    ours_variant: str = "eq2"

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.ours_variant not in ("eq1", "eq2"):
            raise ValueError(f"unknown loss variant {self.ours_variant!r}")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_test": self.n_test,
            "scene": self.scene.to_dict(),
            "profiles": [p.to_dict() for p in self.profiles],
            "train": self.train.to_dict(),
            "wbf": self.wbf.to_dict(),
            "map_iou": self.map_iou,
            "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
            "ours_variant": self.ours_variant,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        return cls(
            int(d["n_train"]),
            int(d["n_test"]),
            SceneConfig.from_dict(d["scene"]),
            tuple(AnnotatorProfile(**p) for p in d["profiles"]),
            TrainConfig.from_dict(d["train"]),
            WbfConfig.from_dict(d["wbf"]),
            float(d["map_iou"]),
            float(d["score_threshold"]),
            float(d["nms_iou"]),
            str(d.get("ours_variant", "eq2")),
        )


def method_names(n_annotators: int) -> list[str]:
    return ["Baseline", *[f"Annotator #{j + 1}" for j in range(n_annotators)], "Ensemble", "Ours"]


def run_seed(cfg: ExperimentConfig, seed: int) -> dict[str, EvalReport]:
    n = cfg.n_train + cfg.n_test
    corpus = build_corpus(n, cfg.scene, cfg.profiles, seed, cfg.n_test / n)
    ds = corpus.dataset
    train_ids, test_ids = corpus.ids("train"), corpus.ids("test")
    truth = {i: corpus.truth[i] for i in test_ids}
    anchors = cfg.train.grid.anchors(cfg.scene.width, cfg.scene.height)
    feats = {r.image_id: extract_features(corpus.pixels[r.image_id], anchors) for r in ds.images}
    eq1 = replace(cfg.train, seed=seed, loss_variant="eq1")
    ours = replace(cfg.train, seed=seed, loss_variant=cfg.ours_variant)

    def fit(labels, tcfg):
        model, _ = train(labels, tcfg, corpus.pixels, train_ids, feats)
        return {i: predict(model, corpus.pixels[i], cfg.score_threshold, cfg.nms_iou) for i in test_ids}

    def score(preds, name):
        return map_at(preds, truth, ds.num_classes, cfg.map_iou, name)

    names = method_names(len(ds.annotators))
    reports = {names[0]: score(fit(pooled_labels(ds), eq1), names[0])}
    member_preds = []
    for j, ann in enumerate(ds.annotators):
        preds = fit(single_annotator_labels(ds, ann), eq1)
        member_preds.append(preds)
        reports[names[1 + j]] = score(preds, names[1 + j])
    ens = {i: fuse_ensemble([p[i] for p in member_preds], cfg.wbf) for i in test_ids}
    reports["Ensemble"] = score(ens, "Ensemble")
    reports["Ours"] = score(fit(fuse_dataset(ds, cfg.wbf), ours), "Ours")
    return reports


@dataclass
class ComparisonTable:
    methods: list[str]
    seeds: list[int]
    reports: dict[str, dict[int, EvalReport]]
    num_classes: int

    def maps(self, method: str) -> np.ndarray:
        return np.array([self.reports[method][s].mAP for s in self.seeds])

    def mean(self, method: str) -> float:
        return float(np.mean(self.maps(method)))

    def sd(self, method: str) -> float:
        v = self.maps(method)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def compare_report(cfg: ExperimentConfig = ExperimentConfig(), seeds: Sequence[int] = range(5), workers: int = 1) -> ComparisonTable:
    seeds = list(seeds)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(run_seed, [cfg] * len(seeds), seeds))
    else:
        results = [run_seed(cfg, s) for s in seeds]
    methods = method_names(len(cfg.profiles))
    reports = {m: {s: r[m] for s, r in zip(seeds, results)} for m in methods}
    return ComparisonTable(methods, seeds, reports, cfg.scene.num_classes)


def _f(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def format_tsv(table: ComparisonTable, cfg: ExperimentConfig | None = None) -> str:
    """Render the table; per-seed rows then ``mean`` and ``sd`` per method."""
    lines = ["# annofuse compare"]
    if cfg is not None:
        lines.append("# config: " + json.dumps({**cfg.to_dict(), "seeds": list(table.seeds)}, sort_keys=True))
    lines.append("# reference mAP@0.4 (full-scale chest X-ray): " + ", ".join(f"{k}={v}" for k, v in REFERENCE_MAP.items()))
    k = table.num_classes
    lines.append("\t".join(["method", "seed", "mAP", *[f"AP_class_{c}" for c in range(k)]]))
    for m in table.methods:
        rows = [table.reports[m][s] for s in table.seeds]
        for s, r in zip(table.seeds, rows):
            lines.append("\t".join([m, str(s), _f(r.mAP), *map(_f, r.ap)]))
        aps = np.array([r.ap for r in rows])
        sd_ap = aps.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(k)
        lines.append("\t".join([m, "mean", _f(table.mean(m)), *map(_f, aps.mean(axis=0))]))
        lines.append("\t".join([m, "sd", _f(table.sd(m)), *map(_f, sd_ap)]))
    return "\n".join(lines) + "\n"


def read_report_config(path) -> tuple[ExperimentConfig, list[int]]:
    """Recover the config and seeds echoed into a report written by :func:`format_tsv`."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# config: "):
                d = json.loads(line[len("# config: ") :])
                return ExperimentConfig.from_dict(d), [int(s) for s in d["seeds"]]
    raise ValueError(f"{path}: no config line")
