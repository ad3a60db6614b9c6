"""Prototypical residual network for anomaly detection and localization."""

from .encoder import EncoderConfig, FeaturePyramid, build_encoder, extract_features
from .model import ModelConfig, PrnModel, ScoreMap, build_model, forward, image_score
from .prototypes import PrototypeBank, fit_prototypes, nearest_prototype, residual

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "FeaturePyramid",
    "ModelConfig",
    "PrnModel",
    "PrototypeBank",
    "ScoreMap",
    "build_encoder",
    "build_model",
    "extract_features",
    "fit_prototypes",
    "forward",
    "image_score",
    "nearest_prototype",
    "residual",
]
