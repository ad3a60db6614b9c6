"""Target areas: random geometric regions where synthetic defects may be placed."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage import draw, filters, measure

SHAPES = ("circle", "rectangle", "polygon")
DATASET_KINDS = ("object", "texture")


@dataclass
class TargetArea:
    mask: np.ndarray
    shape_kind: str
    dataset_kind: str
    fallback: bool = False

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def full_frame(h: int, w: int, dataset_kind: str = "texture") -> TargetArea:
    return TargetArea(np.ones((h, w), dtype=bool), "rectangle", dataset_kind)


def estimate_foreground(image: np.ndarray) -> Optional[np.ndarray]:
    """Otsu split on grayscale, largest component, 5x5 closing.

    The side of the split touching the border less is taken as the object.
    Returns None when no foreground can be separated (e.g. a flat image).
    """
    gray = np.asarray(image, dtype=np.float64).mean(0)
    if gray.max() - gray.min() < 1e-6:
        return None
    fg = gray > filters.threshold_otsu(gray)
    border = np.concatenate([fg[0], fg[-1], fg[:, 0], fg[:, -1]])
    if border.mean() > 0.5:
        fg = ~fg
    labels = measure.label(fg, connectivity=2)
    if labels.max() == 0:
        return None
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    fg = labels == sizes.argmax()
    fg = ndimage.binary_closing(fg, structure=np.ones((5, 5)), border_value=0) | fg
    return fg if fg.any() else None


def _draw_shape(kind: str, h: int, w: int, center: Tuple[float, float], area: float, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    cy, cx = center
    if kind == "circle":
        r = np.sqrt(area / np.pi)
        rr, cc = draw.disk((cy, cx), r, shape=(h, w))
    elif kind == "rectangle":
        aspect = rng.uniform(0.5, 2.0)
        rw = np.sqrt(area * aspect)
        rh = area / rw
        rr, cc = draw.rectangle(
            (int(round(cy - rh / 2)), int(round(cx - rw / 2))),
            extent=(max(1, int(round(rh))), max(1, int(round(rw)))),
            shape=(h, w),
        )
    elif kind == "polygon":
        n = int(rng.integers(3, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.6, 1.2, n)
        # shoelace area of the unit-radius polygon, to scale it to the target area
        xs, ys = radii * np.cos(angles), radii * np.sin(angles)
        unit = 0.5 * abs(np.dot(xs, np.roll(ys, 1)) - np.dot(ys, np.roll(xs, 1)))
        s = np.sqrt(area / max(unit, 1e-6))
        rr, cc = draw.polygon(cy + s * ys, cx + s * xs, shape=(h, w))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    out[rr, cc] = True
    return out


def sample_target_area(
    normal_image: np.ndarray,
    dataset_kind: str,
    rng: np.random.Generator,
    area_range: Tuple[float, float] = (0.02, 0.4),
    max_tries: int = 100,
    foreground: Optional[np.ndarray] = None,
) -> TargetArea:
    """Draw a circle, rectangle or polygon inside the allowed region.

    The allowed region is the whole frame for textures and the estimated
    foreground for objects. The result's area is kept within ``area_range``
    (fractions of the frame) whenever the allowed region permits it.
    """
    if dataset_kind not in DATASET_KINDS:
        raise ValueError(f"dataset_kind must be one of {DATASET_KINDS}, got {dataset_kind!r}")
    image = np.asarray(normal_image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {image.shape}")
    h, w = image.shape[1:]
    fallback = False
    if dataset_kind == "object":
        allowed = foreground if foreground is not None else estimate_foreground(image)
        if allowed is None or not allowed.any():
            allowed = np.ones((h, w), dtype=bool)
            fallback = True
    else:
        allowed = np.ones((h, w), dtype=bool)

    lo, hi = area_range[0] * h * w, area_range[1] * h * w
    ys, xs = np.nonzero(allowed)
    best = None
    for _ in range(max_tries):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        i = int(rng.integers(len(ys)))
        target = rng.uniform(lo, hi)
        m = _draw_shape(kind, h, w, (ys[i] + 0.5, xs[i] + 0.5), target, rng) & allowed
        a = m.sum()
        if a == 0:
            continue
        if lo <= a <= hi:
            return TargetArea(m, kind, dataset_kind, fallback)
        if best is None or abs(a - target) < abs(best[0].sum() - target):
            best = (m, kind)
    if best is None:
        # allowed region too small for any shape: use it whole
        return TargetArea(allowed.copy(), "polygon", dataset_kind, True)
    return TargetArea(best[0], best[1], dataset_kind, fallback)
