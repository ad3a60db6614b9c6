"""Extended anomalies (augmented seen defects) and simulated anomalies (Perlin masks)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentConfig, aug1, random_affine, warp
from .perlin import normalized_noise
from .target_area import TargetArea, full_frame, sample_target_area

KINDS = ("EA", "HEA", "HOA")


class GenerationError(RuntimeError):
    pass


@dataclass
class AnomalySample:
    image: np.ndarray
    mask: np.ndarray
    kind: str
    beta: float
    seed: Optional[int] = None
    target: Optional[TargetArea] = None


@dataclass
class SynthConfig:
    beta_range: Tuple[float, float] = (0.2, 0.9)
    dataset_kind: str = "texture"
    use_target_area: bool = True
    area_range: Tuple[float, float] = (0.02, 0.4)
    aug2_retries: int = 20
    perlin_retries: int = 20
    perlin_period: int = 8
    perlin_octaves: int = 4
    perlin_persistence: float = 0.5
    perlin_threshold: float = 0.5
    grid: int = 8
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def compose_extended(normal: np.ndarray, clipped: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """``E = (1-M)*N + (1-beta)*C + beta*(M*N)``, C already zero outside M."""
    m = np.asarray(mask, dtype=np.float32)[None]
    return (1.0 - m) * normal + (1.0 - beta) * clipped + beta * (m * normal)


def compose_simulated(normal: np.ndarray, source: np.ndarray, mask: np.ndarray, beta: float) -> np.ndarray:
    """``S = (1-M)*N + (1-beta)*(M*A) + beta*(M*N)``."""
    m = np.asarray(mask, dtype=np.float32)[None]
    return (1.0 - m) * normal + (1.0 - beta) * (m * source) + beta * (m * normal)


def grid_shuffle(
    image: np.ndarray,
    grid: int = 8,
    rng: Optional[np.random.Generator] = None,
    permutation: Optional[Sequence[int]] = None,
    return_permutation: bool = False,
):
    """Cut the image into ``grid x grid`` equal cells and reassemble them permuted.

    Output cell ``k`` (row-major) is input cell ``permutation[k]``.
    """
    image = np.asarray(image)
    c, h, w = image.shape
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} does not divide image of size {h}x{w}")
    ch, cw = h // grid, w // grid
    n = grid * grid
    if permutation is None:
        if rng is None:
            raise ValueError("grid_shuffle needs an rng or an explicit permutation")
        permutation = rng.permutation(n)
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(n)):
        raise ValueError("permutation must be a permutation of the grid cells")
    cells = image.reshape(c, grid, ch, grid, cw).transpose(1, 3, 0, 2, 4).reshape(n, c, ch, cw)
    out = cells[permutation].reshape(grid, grid, c, ch, cw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
    return (out, permutation) if return_permutation else out


def perlin_mask(
    h: int,
    w: int,
    target: Optional[TargetArea],
    rng: np.random.Generator,
    config: Optional[SynthConfig] = None,
) -> np.ndarray:
    """Thresholded Perlin noise restricted to the target area; resampled while empty."""
    cfg = config or SynthConfig()
    region = target.mask if target is not None else np.ones((h, w), dtype=bool)
    for _ in range(cfg.perlin_retries):
        noise = normalized_noise((h, w), cfg.perlin_period, rng, cfg.perlin_octaves, cfg.perlin_persistence)
        mask = (noise > cfg.perlin_threshold) & region
        if mask.any():
            return mask
    raise GenerationError(f"Perlin mask stayed empty after {cfg.perlin_retries} draws")


def _target(normal: np.ndarray, rng: np.random.Generator, cfg: SynthConfig, foreground=None) -> TargetArea:
    h, w = normal.shape[1:]
    if not cfg.use_target_area:
        return full_frame(h, w, cfg.dataset_kind)
    return sample_target_area(normal, cfg.dataset_kind, rng, cfg.area_range, foreground=foreground)


def _beta(rng: np.random.Generator, cfg: SynthConfig, beta: Optional[float]) -> float:
    return float(rng.uniform(*cfg.beta_range)) if beta is None else float(beta)


def extended_anomaly(
    normal: np.ndarray,
    seen: Tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    beta: Optional[float] = None,
    config: Optional[SynthConfig] = None,
    target: Optional[TargetArea] = None,
    foreground: Optional[np.ndarray] = None,
) -> AnomalySample:
    """Paste a photometrically and spatially augmented seen defect into ``normal``.

    Raises:
        GenerationError: the warped defect missed the target area on every retry.
    """
    cfg = config or SynthConfig()
    normal = np.asarray(normal, dtype=np.float32)
    seen_image, seen_mask = np.asarray(seen[0], dtype=np.float32), np.asarray(seen[1]) > 0
    if not seen_mask.any():
        raise ValueError("seen anomaly mask is empty")
    if seen_image.shape != normal.shape:
        raise ValueError(f"seen image {seen_image.shape} and normal {normal.shape} differ in shape")
    b = _beta(rng, cfg, beta)
    colored, _ = aug1(seen_image, rng, cfg.augment)
    region = colored * seen_mask[None]
    if target is None:
        target = _target(normal, rng, cfg, foreground)
    for _ in range(cfg.aug2_retries):
        warped, warped_mask = warp(region, seen_mask, random_affine(normal.shape[1:], rng, cfg.augment))
        mask = warped_mask & target.mask
        if mask.any():
            clipped = warped * mask[None]
            image = compose_extended(normal, clipped, mask, b).astype(np.float32)
            return AnomalySample(image, mask, "EA", b, target=target)
    raise GenerationError(f"augmented defect missed the target area {cfg.aug2_retries} times")


def simulated_anomaly(
    normal: np.ndarray,
    source_kind: str,
    texture_pool: Sequence[np.ndarray],
    rng: np.random.Generator,
    beta: Optional[float] = None,
    config: Optional[SynthConfig] = None,
    target: Optional[TargetArea] = None,
    foreground: Optional[np.ndarray] = None,
) -> AnomalySample:
    """Blend an anomaly source into ``normal`` under a Perlin mask.

    ``HEA`` draws the source from ``texture_pool``; ``HOA`` uses the normal
    image itself, photometrically augmented and grid-shuffled.
    """
    cfg = config or SynthConfig()
    normal = np.asarray(normal, dtype=np.float32)
    if source_kind == "HEA":
        if len(texture_pool) == 0:
            raise ValueError("heterologous anomalies need a non-empty texture pool")
        texture = np.asarray(texture_pool[int(rng.integers(len(texture_pool)))], dtype=np.float32)
        if texture.shape != normal.shape:
            raise ValueError(f"texture {texture.shape} and normal {normal.shape} differ in shape")
        source, _ = aug1(texture, rng, cfg.augment)
    elif source_kind == "HOA":
        colored, _ = aug1(normal, rng, cfg.augment)
        source = grid_shuffle(colored, cfg.grid, rng)
    else:
        raise ValueError(f"source_kind must be 'HEA' or 'HOA', got {source_kind!r}")
    b = _beta(rng, cfg, beta)
    if target is None:
        target = _target(normal, rng, cfg, foreground)
    h, w = normal.shape[1:]
    mask = perlin_mask(h, w, target, rng, cfg)
    image = compose_simulated(normal, source, mask, b).astype(np.float32)
    return AnomalySample(image, mask, source_kind, b, target=target)
