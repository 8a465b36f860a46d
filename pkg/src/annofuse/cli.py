"""Command-line entry point: ``annofuse <subcommand> [flags]``.

Subcommands follow the pipeline (simulate, fuse, train, predict, eval,
compare) plus ``render`` and ``loss-check``. Argument errors exit 2 with a
one-line message, runtime errors exit 1.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .annotations import (
    AnnotationError,
    MultiAnnotatorDataset,
    _read_json,
    load_dataset,
    load_fused,
    load_image_pixels,
    parse_fused,
    read_pgm,
    save_dataset,
    save_fused,
)
from .detector import AnchorGrid, TrainConfig, TrainingError, load_model, predict, save_model, train
from .evaluation import map_at
from .experiment import ExperimentConfig, compare_report, format_tsv, read_report_config
from .fusion import CONF_MODES, RESCALE_MODES, WbfConfig, fuse_dataset, pooled_labels, single_annotator_labels
from .geometry import InvalidInputError
from .loss import BACKGROUND_WEIGHT_MODES, AnchorTargets, LossConfig, Prediction, detection_loss, loss_gradient
from .render import load_box_sets, render_svg
from .simulator import AnnotatorProfile, PlacementError, SceneConfig, build_corpus, write_corpus


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(2)


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


# ---------------------------------------------------------------------------
# typed, range-checked flag values


def _number(kind, lo=None, hi=None, lo_open=False, hi_open=False) -> Callable[[str], float]:
    lb = "(" if lo_open or lo is None else "["
    rb = ")" if hi_open or hi is None else "]"
    desc = f"{lb}{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}{rb}"

    def parse(text: str):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if kind is float and not np.isfinite(v):
            raise argparse.ArgumentTypeError(f"must be finite, got {text}")
        bad = (lo is not None and (v <= lo if lo_open else v < lo)) or (
            hi is not None and (v >= hi if hi_open else v > hi)
        )
        if bad:
            raise argparse.ArgumentTypeError(f"must be in {desc}, got {text}")
        return v

    return parse


unit_open = _number(float, 0, 1, True, True)
prob = _number(float, 0, 1)
pos_float = _number(float, 0, None, True)
nonneg_float = _number(float, 0)
pos_int = _number(int, 1)
nonneg_int = _number(int, 0)


def int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"values must be non-negative, got {text}")
    return vals


def float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if any(not (np.isfinite(v) and v >= 0) for v in vals):
        raise argparse.ArgumentTypeError(f"values must be finite and >= 0, got {text}")
    return vals


# ---------------------------------------------------------------------------
# flag groups mirroring the config types


def add_scene_flags(p: argparse.ArgumentParser) -> None:
    d = SceneConfig()
    g = p.add_argument_group("scene")
    g.add_argument("--width", type=pos_int, default=d.width, help="image width in pixels")
    g.add_argument("--height", type=pos_int, default=d.height, help="image height in pixels")
    g.add_argument("--num-classes", type=pos_int, default=d.num_classes, help="number of object classes")
    g.add_argument("--objects-min", type=nonneg_int, default=d.objects_per_image[0], help="fewest objects per image")
    g.add_argument("--objects-max", type=nonneg_int, default=d.objects_per_image[1], help="most objects per image")
    g.add_argument("--size-min", type=pos_int, default=d.object_size[0], help="smallest object side")
    g.add_argument("--size-max", type=pos_int, default=d.object_size[1], help="largest object side")
    g.add_argument(
        "--intensities", type=int_list, default=d.intensity_per_class, help="object intensity per class, comma-separated"
    )
    g.add_argument("--background", type=_number(int, 0, 255), default=d.background_intensity, help="background intensity")
    g.add_argument("--noise-sigma", type=nonneg_float, default=d.background_noise_sigma, help="pixel noise sigma")


def add_profile_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("annotators")
    g.add_argument(
        "--jitter", type=float_list, default=(1.5, 2.5, 3.5), help="coordinate jitter sigma per annotator; sets their number"
    )
    g.add_argument("--miss-rate", type=prob, default=0.1, help="probability an annotator drops a true box")
    g.add_argument("--spurious-rate", type=nonneg_float, default=0.1, help="mean spurious boxes per image")
    g.add_argument("--class-confusion", type=prob, default=0.0, help="probability of a wrong class label")


def add_wbf_flags(p: argparse.ArgumentParser, iou_default: float) -> None:
    g = p.add_argument_group("fusion")
    g.add_argument("--iou-thr", type=unit_open, default=iou_default, help="WBF cluster IoU threshold, in (0, 1)")
    g.add_argument("--conf-mode", choices=CONF_MODES, default="avg", help="cluster confidence")
    g.add_argument("--rescale-mode", choices=RESCALE_MODES, default="min_over_t", help="confidence rescaling")


def add_train_flags(p: argparse.ArgumentParser, weighting_help: str) -> None:
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--weighting", choices=("eq1", "eq2"), default="eq2", help=weighting_help)
    g.add_argument("--eta", type=unit_open, default=d.loss.eta, help="IoU gate for the localisation term, in (0, 1)")
    g.add_argument("--beta", type=pos_float, default=d.loss.beta, help="localisation weight, > 0")
    g.add_argument(
        "--background-weight", choices=BACKGROUND_WEIGHT_MODES, default=d.loss.background_weight_mode,
        help="weight of unmatched anchors under eq2",
    )
    g.add_argument("--epochs", type=pos_int, default=d.epochs, help="training epochs")
    g.add_argument("--lr", type=pos_float, default=d.learning_rate, help="gradient-descent step size")
    g.add_argument("--batch", type=pos_int, default=d.batch, help="images per minibatch")
    g.add_argument("--stride", type=pos_int, default=d.grid.stride, help="anchor grid stride in pixels")
    g.add_argument("--anchor-sizes", type=int_list, default=d.grid.sizes, help="anchor side lengths, comma-separated")


def scene_from(args, parser) -> SceneConfig:
    try:
        return SceneConfig(
            args.width, args.height, args.num_classes, (args.objects_min, args.objects_max),
            (args.size_min, args.size_max), tuple(args.intensities), args.background, args.noise_sigma,
        )
    except ValueError as exc:
        parser.error(f"scene flags: {exc}")


def profiles_from(args) -> tuple[AnnotatorProfile, ...]:
    return tuple(AnnotatorProfile(j, args.miss_rate, args.spurious_rate, args.class_confusion) for j in args.jitter)


def wbf_from(args) -> WbfConfig:
    return WbfConfig(args.iou_thr, args.conf_mode, args.rescale_mode)


def train_from(args, parser, seed: int) -> TrainConfig:
    if not args.anchor_sizes or 0 in args.anchor_sizes:
        parser.error("argument --anchor-sizes: sizes must be positive")
    loss = LossConfig(eta=args.eta, beta=args.beta, background_weight_mode=args.background_weight)
    return TrainConfig(
        args.epochs, args.lr, seed, args.weighting, loss, args.batch, AnchorGrid(args.stride, tuple(args.anchor_sizes))
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, parser) -> None:
    scene = scene_from(args, parser)
    corpus = build_corpus(args.n_images, scene, profiles_from(args), args.seed, args.test_fraction)
    write_corpus(corpus, args.out)
    print(f"wrote {args.n_images} images and {len(corpus.profiles)} annotators to {args.out}")


def cmd_fuse(args, parser) -> None:
    kw = {"images_csv": args.images_csv} if args.format == "vindr-csv" and args.images_csv else {}
    ds = load_dataset(args.input, format=args.format, **kw)
    cfg = WbfConfig(args.iou_thr, args.conf_mode, args.rescale_mode, args.t)
    fd = fuse_dataset(ds, cfg)
    save_fused(fd, args.out)
    n = sum(len(v) for v in fd.fused.values())
    print(f"fused {len(fd.images)} images into {n} boxes -> {args.out}")


def _document_format(path) -> str | None:
    return _read_json(Path(path)).get("format")


def _split_ids(images, split: str) -> list[str]:
    if split == "all":
        return [r.image_id for r in images]
    return [r.image_id for r in images if r.split == split]


def cmd_train(args, parser) -> None:
    if _document_format(args.labels) == "annjson-fused":
        if args.annotator:
            parser.error("argument --annotator: only valid with a multi-annotator labels file")
        labels = load_fused(args.labels)
    else:
        ds = load_dataset(args.labels)
        if args.annotator:
            if args.annotator not in ds.annotators:
                raise CliError(f"annotator {args.annotator!r} not in {args.labels}")
            labels = single_annotator_labels(ds, args.annotator)
        else:
            labels = pooled_labels(ds)
    labels.root = Path(args.image_root) if args.image_root else Path(args.labels).parent
    ids = _split_ids(labels.images, args.split)
    if not ids:
        raise CliError(f"no images in split {args.split!r}")
    model, trace = train(labels, train_from(args, parser, args.seed), image_ids=ids)
    save_model(model, args.out)
    print(f"trained on {len(ids)} images, loss {trace[0]:.4f} -> {trace[-1]:.4f}; model -> {args.out}")


def cmd_predict(args, parser) -> None:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    root = Path(args.image_root) if args.image_root else Path(args.dataset).parent
    ids = _split_ids(ds.images, args.split)
    keep = set(ids)
    images = [r for r in ds.images if r.image_id in keep]
    preds = {}
    for rec in images:
        preds[(rec.image_id, "model")] = predict(model, load_image_pixels(rec, root), args.score_thr, args.nms_iou)
    out = MultiAnnotatorDataset(list(ds.classes), images, ["model"], preds)
    config = {"model": model.config, "score_threshold": args.score_thr, "nms_iou": args.nms_iou, "split": args.split}
    save_dataset(out, args.out, config=config)
    print(f"{sum(len(v) for v in preds.values())} detections on {len(images)} images -> {args.out}")


def _boxes_by_image(path, annotator: str | None):
    path = Path(path)
    if _document_format(path) == "annjson-fused":
        fd = parse_fused(_read_json(path), path)
        return list(fd.classes), {r.image_id: [f.as_labeled() for f in fd.fused.get(r.image_id, [])] for r in fd.images}
    ds = load_dataset(path)
    if annotator is None:
        if len(ds.annotators) != 1:
            raise CliError(f"{path} has {len(ds.annotators)} annotators; pick one with the annotator flag")
        annotator = ds.annotators[0]
    if annotator not in ds.annotators:
        raise CliError(f"annotator {annotator!r} not in {path}")
    return list(ds.classes), {r.image_id: list(ds.boxes(r.image_id, annotator)) for r in ds.images}


def cmd_eval(args, parser) -> None:
    pred_classes, preds = _boxes_by_image(args.pred, args.pred_annotator)
    truth_classes, truth = _boxes_by_image(args.truth, args.truth_annotator)
    if pred_classes != truth_classes:
        raise CliError(f"class lists differ: {pred_classes} vs {truth_classes}")
    missing = [i for i in preds if i not in truth]
    if missing:
        raise CliError(f"{len(missing)} predicted images have no ground truth, e.g. {missing[0]!r}")
    gts = {i: truth[i] for i in preds}
    report = map_at(preds, gts, len(truth_classes), args.map_iou)
    config = {"map_iou": args.map_iou, "pred_annotator": args.pred_annotator, "truth_annotator": args.truth_annotator}
    lines = ["# annofuse eval", "# config: " + json.dumps(config, sort_keys=True), "class\tn_gt\tAP"]
    for name, n, ap in zip(truth_classes, report.n_gt, report.ap):
        lines.append(f"{name}\t{n}\t{ap:.6f}")
    lines.append(f"mAP\t{report.n_gts}\t{report.mAP:.6f}")
    text = "\n".join(lines) + "\n"
    _emit(text, args.out)


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_compare(args, parser) -> None:
    if args.config:
        cfg, seeds = read_report_config(args.config)
    else:
        train_cfg = train_from(args, parser, 0)
        cfg = ExperimentConfig(
            args.n_train, args.n_test, scene_from(args, parser), profiles_from(args), train_cfg, wbf_from(args),
            args.map_iou, args.score_thr, args.nms_iou, args.weighting,
        )
        seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    start = time.perf_counter()
    table = compare_report(cfg, seeds, args.workers)
    _emit(format_tsv(table, cfg), args.out)
    summary = ", ".join(f"{m} {table.mean(m):.3f}" for m in table.methods)
    print(f"mean mAP@{cfg.map_iou}: {summary} ({time.perf_counter() - start:.0f} s)", file=sys.stderr)


def cmd_render(args, parser) -> None:
    for p in [args.image, *args.boxes]:
        if not Path(p).is_file():
            raise CliError(f"file not found: {p}")
    pixels = read_pgm(args.image)
    image_id = args.image_id or Path(args.image).stem
    sets = [s for path in args.boxes for s in load_box_sets(path, image_id)]
    svg = render_svg(pixels, sets, args.scale)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    print(f"{sum(len(s.boxes) for s in sets)} boxes in {sum(1 for s in sets if s.boxes)} sets -> {args.out}")


def _random_instance(rng, n, k):
    matched = rng.random(n) < 0.5
    cls = np.where(matched, rng.integers(0, k, n), k)
    target = np.where(matched[:, None], rng.normal(0, 0.5, (n, 4)), np.nan)
    tg = AnchorTargets(np.tile([0.0, 0.0, 8.0, 8.0], (n, 1)), matched, cls, target, rng.random(n))
    offsets = rng.normal(0, 1, (n, 4))
    # keep clear of the smooth-L1 kink where the derivative jumps
    resid = np.abs(offsets - np.nan_to_num(target))
    offsets = np.where(np.abs(resid - 1) < 1e-3, offsets + 0.01, offsets)
    return Prediction(rng.normal(0, 1.5, (n, k + 1)), offsets), tg


def gradient_audit(instances: int, seed: int, anchors: int, num_classes: int, beta: float, h: float) -> dict[str, float]:
    """Largest componentwise relative error of analytic vs central-difference gradients."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(num_classes=num_classes, beta=beta)
    worst = {"eq1": 0.0, "eq2": 0.0}
    for _ in range(instances):
        pred, tg = _random_instance(rng, anchors, num_classes)
        for variant in worst:
            analytic = loss_gradient(pred, tg, cfg, variant)
            for which, a in zip(("class_logits", "box_offsets"), analytic):
                base = getattr(pred, which)
                for idx in np.ndindex(base.shape):
                    vals = []
                    for step in (h, -h):
                        moved = base.copy()
                        moved[idx] += step
                        kw = {"class_logits": pred.class_logits, "box_offsets": pred.box_offsets, which: moved}
                        vals.append(detection_loss(Prediction(**kw), tg, cfg, variant).total)
                    num = (vals[0] - vals[1]) / (2 * h)
                    err = abs(num - a[idx]) / max(abs(num), abs(a[idx]), 1e-8)
                    worst[variant] = max(worst[variant], err)
    return worst


def cmd_loss_check(args, parser) -> None:
    worst = gradient_audit(args.instances, args.seed, args.anchors, args.num_classes, args.beta, args.h)
    for variant, err in worst.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{variant}: max relative error {err:.3e} over {args.instances} instances [{status}]")
    if max(worst.values()) > args.tol:
        raise CliError(f"gradient mismatch above tolerance {args.tol}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> ArgParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = ArgParser(prog="annofuse", description="Multi-annotator box fusion and agreement-weighted detection.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func, parser=p)
        return p

    p = cmd("simulate", cmd_simulate, "generate a synthetic multi-annotator corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=nonneg_int, default=0, help="corpus seed")
    p.add_argument("--n-images", type=pos_int, default=250, help="number of images")
    p.add_argument("--test-fraction", type=prob, default=0.2, help="share of images held out for testing")
    add_scene_flags(p)
    add_profile_flags(p)

    p = cmd("fuse", cmd_fuse, "fuse annotator boxes with weighted boxes fusion")
    p.add_argument("--input", required=True, help="multi-annotator dataset")
    p.add_argument("--format", choices=("annjson", "vindr-csv"), default="annjson", help="input format")
    p.add_argument("--images-csv", default=None, help="image size sidecar for vindr-csv (default: images.csv beside input)")
    p.add_argument("--out", required=True, help="fused output file")
    add_wbf_flags(p, WbfConfig().iou_threshold)
    p.add_argument("--t", type=pos_int, default=None, help="annotator count for rescaling (default: dataset's)")

    p = cmd("train", cmd_train, "train the anchor detector")
    p.add_argument("--labels", required=True, help="fused file, or multi-annotator dataset (pooled unless --annotator)")
    p.add_argument("--annotator", default=None, help="train on this annotator's boxes only")
    p.add_argument("--split", choices=("train", "test", "all"), default="train", help="images to train on")
    p.add_argument("--image-root", default=None, help="directory image paths are relative to (default: labels dir)")
    p.add_argument("--seed", type=nonneg_int, default=0, help="shuffle seed")
    p.add_argument("--out", required=True, help="model file")
    add_train_flags(p, "loss: eq1 unweighted, eq2 scaled by fused confidence")

    p = cmd("predict", cmd_predict, "run a trained detector over dataset images")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--dataset", required=True, help="dataset listing the images")
    p.add_argument("--image-root", default=None, help="directory image paths are relative to (default: dataset dir)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test", help="images to predict on")
    p.add_argument("--score-thr", type=prob, default=0.3, help="minimum class probability")
    p.add_argument("--nms-iou", type=unit_open, default=0.45, help="NMS IoU threshold, in (0, 1)")
    p.add_argument("--out", required=True, help="predictions file (annjson)")

    p = cmd("eval", cmd_eval, "score predictions with mAP")
    p.add_argument("--pred", required=True, help="predictions (annjson or fused)")
    p.add_argument("--truth", required=True, help="ground truth (annjson)")
    p.add_argument("--pred-annotator", default=None, help="annotator id inside the predictions file")
    p.add_argument("--truth-annotator", default=None, help="annotator id inside the truth file")
    p.add_argument("--map-iou", type=unit_open, default=0.4, help="IoU for a true positive, in (0, 1)")
    p.add_argument("--out", default=None, help="report file (default: stdout)")

    p = cmd("compare", cmd_compare, "run the full baseline comparison over several seeds")
    p.add_argument("--seeds", type=pos_int, default=5, help="number of seeds")
    p.add_argument("--seed-start", type=nonneg_int, default=0, help="first seed")
    p.add_argument("--workers", type=pos_int, default=1, help="parallel processes across seeds")
    p.add_argument("--out", default=None, help="TSV report (default: stdout)")
    p.add_argument("--config", default=None, help="rerun the config embedded in a previous report; other experiment flags are ignored")
    d = ExperimentConfig()
    p.add_argument("--n-train", type=pos_int, default=d.n_train, help="training images per seed")
    p.add_argument("--n-test", type=pos_int, default=d.n_test, help="test images per seed")
    p.add_argument("--map-iou", type=unit_open, default=d.map_iou, help="IoU for a true positive, in (0, 1)")
    p.add_argument("--score-thr", type=prob, default=d.score_threshold, help="minimum class probability")
    p.add_argument("--nms-iou", type=unit_open, default=d.nms_iou, help="NMS IoU threshold, in (0, 1)")
    add_wbf_flags(p, d.wbf.iou_threshold)
    add_train_flags(p, "loss for the fused-label method (eq1 gives the unweighted ablation)")
    add_scene_flags(p)
    add_profile_flags(p)

    p = cmd("render", cmd_render, "draw box sets over an image as SVG")
    p.add_argument("--image", required=True, help="PGM image")
    p.add_argument("--boxes", action="append", default=[], help="annotation or fused file; repeatable")
    p.add_argument("--image-id", default=None, help="image id in the box files (default: image file stem)")
    p.add_argument("--scale", type=pos_int, default=8, help="pixels per image pixel")
    p.add_argument("--out", required=True, help="SVG file")

    p = cmd("loss-check", cmd_loss_check, "compare analytic loss gradients with central differences")
    p.add_argument("--instances", type=pos_int, default=100, help="random instances")
    p.add_argument("--seed", type=nonneg_int, default=0, help="instance seed")
    p.add_argument("--anchors", type=pos_int, default=8, help="anchors per instance")
    p.add_argument("--num-classes", type=pos_int, default=2, help="foreground classes")
    p.add_argument("--beta", type=pos_float, default=1.0, help="localisation weight")
    p.add_argument("--h", type=pos_float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=pos_float, default=1e-5, help="allowed relative error")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args, args.parser)
    except (CliError, AnnotationError, InvalidInputError, TrainingError, PlacementError, OSError, ValueError) as exc:
        sys.stderr.write(f"annofuse {args.command}: error: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
