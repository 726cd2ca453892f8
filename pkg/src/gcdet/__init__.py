"""Anchor-free X-ray fracture detector with global-context attention.

Public surface: model construction and accounting (detector, flops), the
global-context block (gc_block), assignment and loss (loss), dataset tooling
(data), detection metrics (evaluate) and the training loop (train). The
command-line interface lives in cli.
"""

__version__ = "0.1.0"

from .data import (
    ImageSample,
    SplitManifest,
    augment_blend,
    build_augmented_trainset,
    letterbox,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_generate,
)
from .detector import (
    Detection,
    Detector,
    DetectorConfig,
    RawPredictions,
    build_detector,
    count_params,
    decode_boxes,
    forward_raw,
    gc_param_delta,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    GcdetError,
    LabelParseError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
)
from .evaluate import (
    EvalReport,
    GroundTruth,
    TimingStats,
    benchmark_inference,
    evaluate_detections,
    iou,
    nms,
)
from .flops import PROFILE_INPUT_SIZE, count_flops, estimate_flops
from .gc_block import GCConfig, GlobalContextBlock, gc_param_count
from .loss import (
    Assignment,
    AssignerConfig,
    LossBreakdown,
    LossWeights,
    assign_targets,
    ciou,
    detection_loss,
)
from .train import TrainConfig, TrainHistory, lr_schedule, run_training

__all__ = [
    "__version__",
    "ImageSample",
    "SplitManifest",
    "augment_blend",
    "build_augmented_trainset",
    "letterbox",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "synth_generate",
    "Detection",
    "Detector",
    "DetectorConfig",
    "RawPredictions",
    "build_detector",
    "count_params",
    "decode_boxes",
    "forward_raw",
    "gc_param_delta",
    "load_checkpoint",
    "save_checkpoint",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "GcdetError",
    "LabelParseError",
    "NumericError",
    "ShapeError",
    "TrainingDivergedError",
    "EvalReport",
    "GroundTruth",
    "TimingStats",
    "benchmark_inference",
    "evaluate_detections",
    "iou",
    "nms",
    "PROFILE_INPUT_SIZE",
    "count_flops",
    "estimate_flops",
    "GCConfig",
    "GlobalContextBlock",
    "gc_param_count",
    "Assignment",
    "AssignerConfig",
    "LossBreakdown",
    "LossWeights",
    "assign_targets",
    "ciou",
    "detection_loss",
    "TrainConfig",
    "TrainHistory",
    "lr_schedule",
    "run_training",
]
