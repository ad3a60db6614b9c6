"""Seeded multi-octave Perlin gradient noise."""

from __future__ import annotations

from typing import Tuple

import numpy as np


def _fade(t: np.ndarray) -> np.ndarray:
    return ((6 * t - 15) * t + 10) * t * t * t


def perlin_2d(shape: Tuple[int, int], res: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Single-octave noise with ``res`` lattice cells along each axis.

    ``shape`` must be a multiple of ``res`` along both axes.
    """
    h, w = shape
    ry, rx = res
    if h % ry or w % rx:
        raise ValueError(f"shape {shape} is not a multiple of lattice resolution {res}")
    dy, dx = h // ry, w // rx
    angles = 2 * np.pi * rng.random((ry + 1, rx + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    ys = (np.arange(h) % dy) / dy
    xs = (np.arange(w) % dx) / dx
    fy, fx = np.meshgrid(ys, xs, indexing="ij")
    cy = np.arange(h) // dy
    cx = np.arange(w) // dx
    iy, ix = np.meshgrid(cy, cx, indexing="ij")

    def corner(oy: int, ox: int) -> np.ndarray:
        g = grads[iy + oy, ix + ox]
        return g[..., 0] * (fy - oy) + g[..., 1] * (fx - ox)

    ty, tx = _fade(fy), _fade(fx)
    top = corner(0, 0) + tx * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + tx * (corner(1, 1) - corner(1, 0))
    return np.sqrt(2) * (top + ty * (bottom - top))


def fractal_perlin(
    shape: Tuple[int, int],
    period: int,
    rng: np.random.Generator,
    octaves: int = 4,
    persistence: float = 0.5,
) -> np.ndarray:
    """Sum of octaves with lattice periods ``period / 2**o``.

    Octaves whose period would drop below 2 pixels are skipped: Perlin noise
    is identically zero on its own lattice points.
    """
    h, w = shape
    if period < 2 or h % period or w % period:
        raise ValueError(f"shape {shape} must be a multiple of lattice period {period} >= 2")
    total = np.zeros(shape, dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        p = period // 2 ** o
        if p < 2 or period % 2 ** o:
            break
        total += amp * perlin_2d(shape, (h // p, w // p), rng)
        amp *= persistence
    return total


def normalized_noise(shape, period, rng, octaves=4, persistence=0.5) -> np.ndarray:
    noise = fractal_perlin(shape, period, rng, octaves, persistence)
    lo, hi = noise.min(), noise.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (noise - lo) / (hi - lo)
