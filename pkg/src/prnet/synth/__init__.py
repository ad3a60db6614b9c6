"""Online anomaly synthesis."""

from .augment import PHOTOMETRIC_OPS, AugmentConfig, aug1, random_affine, warp
from .generate import (
    KINDS,
    AnomalySample,
    GenerationError,
    SynthConfig,
    compose_extended,
    compose_simulated,
    extended_anomaly,
    grid_shuffle,
    perlin_mask,
    simulated_anomaly,
)
from .perlin import fractal_perlin, normalized_noise, perlin_2d
from .target_area import TargetArea, estimate_foreground, full_frame, sample_target_area

__all__ = [
    "KINDS",
    "PHOTOMETRIC_OPS",
    "AnomalySample",
    "AugmentConfig",
    "GenerationError",
    "SynthConfig",
    "TargetArea",
    "aug1",
    "compose_extended",
    "compose_simulated",
    "estimate_foreground",
    "extended_anomaly",
    "fractal_perlin",
    "full_frame",
    "grid_shuffle",
    "normalized_noise",
    "perlin_2d",
    "perlin_mask",
    "random_affine",
    "sample_target_area",
    "simulated_anomaly",
    "warp",
]
