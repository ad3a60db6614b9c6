"""Photometric (Aug1) and spatial (Aug2) augmentations on (3, H, W) float images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from PIL import Image, ImageEnhance, ImageOps
from scipy import ndimage


@dataclass
class AugmentConfig:
    solarize_threshold: Tuple[float, float] = (64 / 255, 192 / 255)
    posterize_bits: Tuple[int, int] = (3, 6)
    sharpness: Tuple[float, float] = (0.5, 2.0)
    gamma: Tuple[float, float] = (0.7, 1.5)
    rotation_deg: Tuple[float, float] = (-45.0, 45.0)
    shear: Tuple[float, float] = (-0.2, 0.2)
    max_shift: float = 0.25
    n_ops: int = 2


def to_pil(image: np.ndarray) -> Image.Image:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")


def from_pil(img: Image.Image) -> np.ndarray:
    return np.transpose(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0, (2, 0, 1)).copy()


def _equalize(image, rng, cfg):
    return from_pil(ImageOps.equalize(to_pil(image)))


def _solarize(image, rng, cfg):
    thr = int(round(255 * rng.uniform(*cfg.solarize_threshold)))
    return from_pil(ImageOps.solarize(to_pil(image), threshold=thr))


def _posterize(image, rng, cfg):
    bits = int(rng.integers(cfg.posterize_bits[0], cfg.posterize_bits[1] + 1))
    return from_pil(ImageOps.posterize(to_pil(image), bits))


def _sharpness(image, rng, cfg):
    return from_pil(ImageEnhance.Sharpness(to_pil(image)).enhance(rng.uniform(*cfg.sharpness)))


def _autocontrast(image, rng, cfg):
    return from_pil(ImageOps.autocontrast(to_pil(image)))


def _invert(image, rng, cfg):
    return (1.0 - np.asarray(image, dtype=np.float32)).astype(np.float32)


def _gamma(image, rng, cfg):
    return np.power(np.clip(image, 0.0, 1.0), rng.uniform(*cfg.gamma)).astype(np.float32)


PHOTOMETRIC_OPS: Dict[str, Callable] = {
    "equalize": _equalize,
    "solarize": _solarize,
    "posterize": _posterize,
    "sharpness": _sharpness,
    "autocontrast": _autocontrast,
    "invert": _invert,
    "gamma_contrast": _gamma,
}


def aug1(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Tuple[np.ndarray, List[str]]:
    """Apply ``cfg.n_ops`` distinct photometric ops in random order."""
    cfg = cfg or AugmentConfig()
    names = list(PHOTOMETRIC_OPS)
    chosen = [names[i] for i in rng.choice(len(names), size=cfg.n_ops, replace=False)]
    out = np.asarray(image, dtype=np.float32)
    for name in chosen:
        out = PHOTOMETRIC_OPS[name](out, rng, cfg)
    return out, chosen


def random_affine(shape: Tuple[int, int], rng: np.random.Generator, cfg: AugmentConfig | None = None) -> np.ndarray:
    """3x3 forward map (rotate, shear, shift about the image center) in (row, col) coords."""
    cfg = cfg or AugmentConfig()
    h, w = shape
    theta = np.deg2rad(rng.uniform(*cfg.rotation_deg))
    sh = rng.uniform(*cfg.shear)
    ty = rng.uniform(-cfg.max_shift, cfg.max_shift) * h
    tx = rng.uniform(-cfg.max_shift, cfg.max_shift) * w
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, 0.0], [sh, 1.0]])
    lin = rot @ shear
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    mat = np.eye(3)
    mat[:2, :2] = lin
    mat[:2, 2] = center - lin @ center + np.array([ty, tx])
    return mat


def warp(image: np.ndarray, mask: np.ndarray, affine: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Warp a (3, H, W) image (bilinear) and a (H, W) mask (nearest) by a forward affine."""
    inv = np.linalg.inv(affine)
    lin, off = inv[:2, :2], inv[:2, 2]
    out = np.stack(
        [ndimage.affine_transform(ch, lin, offset=off, order=1, mode="constant", cval=0.0) for ch in image]
    ).astype(np.float32)
    out_mask = ndimage.affine_transform(
        np.asarray(mask, dtype=np.float32), lin, offset=off, order=0, mode="constant", cval=0.0
    ) > 0.5
    return np.clip(out, 0.0, 1.0) * out_mask[None], out_mask
