"""Desk-scale federated U-Net segmentation simulator on a small numpy autodiff core."""

from .aggregators import Aggregator, AggregatorSpec, ClientUpdate
from .dataset import AugmentConfig, ImageSample, generate_synthetic
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    FedSegError,
    ManifestError,
    NonFiniteError,
    ShapeError,
)
from .federation import FLConfig, partition, run_training
from .metrics import MetricsConfig, MetricsReport, evaluate_predictions
from .unet import UNetConfig, UNetModel, build_unet, forward, predict
from .weights import ModelWeights

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "AggregatorSpec", "AugmentConfig", "CheckpointError", "ClientUpdate", "ConfigError",
    "DivergenceError", "FLConfig", "FedSegError", "ImageSample", "ManifestError", "MetricsConfig",
    "MetricsReport", "ModelWeights", "NonFiniteError", "ShapeError", "UNetConfig", "UNetModel",
    "build_unet", "evaluate_predictions", "forward", "generate_synthetic", "partition", "predict",
    "run_training",
]
