"""Fuse boxes from several annotators and train a detector weighted by their agreement."""
from .annotations import (
    ImageRecord,
    LabeledBox,
    MultiAnnotatorDataset,
    load_dataset,
    load_fused,
    load_image_pixels,
    save_dataset,
    save_fused,
)
from .detector import AnchorGrid, DetectorModel, TrainConfig, fuse_ensemble, load_model, predict, save_model, train
from .evaluation import EvalReport, average_precision, map_at, match_predictions
from .experiment import ExperimentConfig, compare_report, format_tsv, run_seed
from .fusion import FusedBox, FusedDataset, WbfConfig, fuse_dataset, fuse_image
from .geometry import Box, InvalidInputError, clip_to_image, iou
from .loss import LossConfig, detection_loss, encode_targets, loss_eq1, loss_eq2, loss_gradient
from .simulator import AnnotatorProfile, SceneConfig, build_corpus, generate_scene

__version__ = "0.1.0"

__all__ = [
    "AnchorGrid",
    "AnnotatorProfile",
    "Box",
    "DetectorModel",
    "EvalReport",
    "ExperimentConfig",
    "FusedBox",
    "FusedDataset",
    "ImageRecord",
    "InvalidInputError",
    "LabeledBox",
    "LossConfig",
    "MultiAnnotatorDataset",
    "SceneConfig",
    "TrainConfig",
    "WbfConfig",
    "average_precision",
    "build_corpus",
    "clip_to_image",
    "compare_report",
    "detection_loss",
    "encode_targets",
    "format_tsv",
    "fuse_dataset",
    "fuse_ensemble",
    "fuse_image",
    "generate_scene",
    "iou",
    "load_dataset",
    "load_fused",
    "load_image_pixels",
    "load_model",
    "loss_eq1",
    "loss_eq2",
    "loss_gradient",
    "map_at",
    "match_predictions",
    "predict",
    "run_seed",
    "save_dataset",
    "save_fused",
    "save_model",
    "train",
]
