"""Nested U-Net decoders with lightweight attention blocks for coronary angiography segmentation."""

__version__ = "0.1.0"

from .architecture import ModelSpec, SegmentationModel, build_model, model_forward
from .data import AnnotatedImage, AugmentationPolicy, generate_phantom
from .encoders import available_encoders, build_encoder
from .estimator import SegmentationEstimator
from .exceptions import ConfigError, ContractError, DataError, NumericError
from .losses import LossConfig, combined_loss
from .metrics import generalized_dice_score
from .training import TrainConfig, train

__all__ = [
    "AnnotatedImage",
    "AugmentationPolicy",
    "ConfigError",
    "ContractError",
    "DataError",
    "LossConfig",
    "ModelSpec",
    "NumericError",
    "SegmentationEstimator",
    "SegmentationModel",
    "TrainConfig",
    "available_encoders",
    "build_encoder",
    "build_model",
    "combined_loss",
    "generalized_dice_score",
    "generate_phantom",
    "model_forward",
    "train",
]
