"""Toy extractors, generator and detectors: definitions, training, IO."""

from .detect import decode_batch, decode_detections, iou, nms
from .models import (
    Detection,
    DetectorModel,
    ExtractorModel,
    GeneratorModel,
    ToyModel,
    build_detector,
    build_extractor,
    build_generator,
)
from .train import TrainConfig, TrainingError, train_toy_models

__all__ = [
    "Detection",
    "DetectorModel",
    "ExtractorModel",
    "GeneratorModel",
    "ToyModel",
    "build_detector",
    "build_extractor",
    "build_generator",
    "decode_batch",
    "decode_detections",
    "iou",
    "nms",
    "TrainConfig",
    "TrainingError",
    "train_toy_models",
]

from .serialize import FormatError, UnsupportedVersionError, load_model, save_model  # noqa: E402

__all__ += ["FormatError", "UnsupportedVersionError", "load_model", "save_model"]
