"""Per-scale prototype banks built by k-means over whole normal feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .encoder import NUM_SCALES, FeaturePyramid


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective_history: List[float]
    n_iter: int
    converged: bool


@dataclass
class PrototypeBank:
    """Frozen prototype sets, one ``(K, c, h, w)`` float32 array per scale."""

    prototypes: List[np.ndarray]
    ratio: float
    kmeans_max_iter: int = 300
    seed: int = 0
    n_iter: List[int] = field(default_factory=list)
    objective_history: List[List[float]] = field(default_factory=list)
    distance: str = "abs"
    frozen: bool = True

    def __post_init__(self) -> None:
        if len(self.prototypes) != NUM_SCALES:
            raise ValueError(f"a bank has exactly {NUM_SCALES} scales")
        for p in self.prototypes:
            if p.ndim != 4 or p.shape[0] < 1:
                raise ValueError(f"prototype array must be (K>=1, c, h, w), got {p.shape}")
            if not np.all(np.isfinite(p)):
                raise ValueError("prototypes must be finite")
        if self.distance not in ("abs", "squared"):
            raise ValueError(f"unknown residual distance {self.distance!r}")
        self.prototypes = [np.ascontiguousarray(p, dtype=np.float32) for p in self.prototypes]
        for p in self.prototypes:
            p.setflags(write=False)

    @property
    def sizes(self) -> List[int]:
        return [p.shape[0] for p in self.prototypes]

    def shapes(self) -> List[Tuple[int, int, int]]:
        return [tuple(p.shape[1:]) for p in self.prototypes]


@dataclass
class ResidualPyramid:
    maps: List[np.ndarray]
    indices: List[int]


def num_prototypes(n_normal: int, ratio: float) -> int:
    """K = max(1, round(ratio * n_normal)), with Python's round-half-to-even."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    return max(1, int(round(ratio * n_normal)))


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared L2, expanded form clipped at zero against cancellation
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm initialised from ``k`` distinct rows of ``x``.

    Runs in float64. ``objective_history[t]`` is the sum of squared distances
    to the assigned centers after the t-th assignment step; it is
    non-increasing. An empty cluster is reseeded with the point farthest from
    its current center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(n, size=k, replace=False)].copy()

    labels = np.full(n, -1)
    history: List[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = x[members].mean(0)
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            own = ((x - centers[labels]) ** 2).sum(1)
            # only steal from clusters that keep at least one member
            own[counts[labels] <= 1] = -1.0
            far = int(own.argmax())
            if own[far] < 0:
                continue
            counts[labels[far]] -= 1
            labels[far] = c
            counts[c] = 1
            centers[c] = x[far]
    return KMeansResult(centers, labels, history, it, converged)


def fit_prototypes(
    normal_features: Sequence[FeaturePyramid],
    ratio: float = 0.1,
    max_iter: int = 300,
    seed: int = 0,
    distance: str = "abs",
) -> PrototypeBank:
    """Cluster the normal feature maps of every scale independently."""
    if len(normal_features) == 0:
        raise ValueError("fit_prototypes needs at least one normal feature pyramid")
    k = num_prototypes(len(normal_features), ratio)
    prototypes, n_iter, hist = [], [], []
    for j in range(NUM_SCALES):
        stack = np.stack([np.asarray(p.maps[j]) for p in normal_features])
        shape = stack.shape[1:]
        res = kmeans(stack.reshape(len(stack), -1), k, max_iter=max_iter, seed=seed + j)
        prototypes.append(res.centers.reshape((k,) + shape).astype(np.float32))
        n_iter.append(res.n_iter)
        hist.append(res.objective_history)
    return PrototypeBank(
        prototypes=prototypes,
        ratio=ratio,
        kmeans_max_iter=max_iter,
        seed=seed,
        n_iter=n_iter,
        objective_history=hist,
        distance=distance,
    )


def nearest_prototype(bank: PrototypeBank, feature_map: np.ndarray, scale: int) -> Tuple[int, np.ndarray]:
    """Index and array of the closest prototype at ``scale`` (1, 2 or 3).

    Ties go to the lowest index.
    """
    if scale not in (1, 2, 3):
        raise ValueError(f"scale must be 1, 2 or 3, got {scale}")
    protos = bank.prototypes[scale - 1]
    feature_map = np.asarray(feature_map)
    if feature_map.shape != protos.shape[1:]:
        raise ValueError(
            f"feature map shape {feature_map.shape} does not match scale {scale} "
            f"prototypes {protos.shape[1:]}"
        )
    flat = protos.reshape(len(protos), -1).astype(np.float64)
    q = feature_map.reshape(1, -1).astype(np.float64)
    d = ((flat - q) ** 2).sum(1)
    idx = int(np.argmin(d))
    return idx, protos[idx]


def residual(bank: PrototypeBank, pyramid: FeaturePyramid) -> ResidualPyramid:
    maps, indices = [], []
    for j in range(NUM_SCALES):
        f = np.asarray(pyramid.maps[j])
        idx, proto = nearest_prototype(bank, f, j + 1)
        diff = f.astype(np.float32) - proto
        maps.append(np.abs(diff) if bank.distance == "abs" else diff * diff)
        indices.append(idx)
    return ResidualPyramid(maps, indices)
