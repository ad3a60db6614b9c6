"""Image/pixel AUROC, pixel AP and the per-region-overlap (PRO) score."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class UndefinedMetricError(ValueError):
    pass


def _prepare(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def _tie_grouped_counts(s: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) at every distinct threshold, highest threshold first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    return tp, fp


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve; ties count one half (Mann-Whitney)."""
    s, y = _prepare(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    tp, fp = _tie_grouped_counts(s, y)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def average_precision(scores, labels) -> float:
    """Sum of precision times recall increment over descending distinct thresholds."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive sample")
    tp, fp = _tie_grouped_counts(s, y)
    precision = tp / (tp + fp)
    recall = np.r_[0.0, tp / n_pos]
    return float(np.sum(np.diff(recall) * precision))


def pro_curve(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    max_thresholds: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(fpr, mean region overlap) for every threshold, fpr ascending.

    Pixels with ``score >= t`` are predicted anomalous. Regions are
    8-connected components of the ground truth, each weighted equally. The
    point (0, 0) for a threshold above every score is included.
    """
    if len(score_maps) != len(gt_masks):
        raise ValueError("need one ground-truth mask per score map")
    region_scores: List[np.ndarray] = []
    negatives = []
    for smap, gt in zip(score_maps, gt_masks):
        smap = np.asarray(smap, dtype=np.float64)
        gt = np.asarray(gt) > 0
        if smap.shape != gt.shape:
            raise ValueError(f"score map {smap.shape} and mask {gt.shape} differ in shape")
        labels, n = ndimage.label(gt, structure=EIGHT_CONNECTED)
        for r in range(1, n + 1):
            region_scores.append(np.sort(smap[labels == r]))
        negatives.append(smap[~gt])
    if not region_scores:
        raise UndefinedMetricError("PRO needs at least one ground-truth region")
    neg = np.sort(np.concatenate(negatives)) if negatives else np.zeros(0)
    if neg.size == 0:
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    thresholds = np.unique(np.concatenate([neg] + region_scores))[::-1]
    if max_thresholds is not None and thresholds.size > max_thresholds:
        q = np.linspace(0.0, 1.0, max_thresholds)
        thresholds = np.unique(np.quantile(thresholds, q))[::-1]
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    overlap = np.zeros(thresholds.size)
    for rs in region_scores:
        overlap += (rs.size - np.searchsorted(rs, thresholds, side="left")) / rs.size
    overlap /= len(region_scores)
    return np.r_[0.0, fpr], np.r_[0.0, overlap]


def integrate_step(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    """Normalized integral over [0, limit] of the best overlap reachable at each FPR.

    Only attainable operating points count: between two points the curve keeps
    the lower point's overlap (no interpolation across a tie group).
    """
    total = 0.0
    for i in range(fpr.size):
        start = fpr[i]
        if start >= limit:
            break
        end = fpr[i + 1] if i + 1 < fpr.size else limit
        total += pro[i] * (min(end, limit) - start)
    return float(total / limit)


def pro_score(
    score_maps: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    max_thresholds: Optional[int] = None,
) -> float:
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(score_maps, gt_masks, max_thresholds)
    return integrate_step(fpr, pro, fpr_limit)


@dataclass
class EvalReport:
    image_auroc: float
    pixel_auroc: float
    pro: float
    pixel_ap: float
    n_images: int
    n_anomalous: int
    n_pixels: int
    fpr_limit: float
    anomalous_pixel_rate: float

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        types = {"n_images": int, "n_anomalous": int, "n_pixels": int}
        return cls(**{k: types.get(k, float)(v) for k, v in kv.items()})


@dataclass
class ImageScore:
    image_id: str
    label: int
    score: float


def report_from_scores(
    labels: Sequence[int],
    image_scores: Sequence[float],
    score_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    max_thresholds: Optional[int] = None,
) -> EvalReport:
    labels = np.asarray(labels, dtype=int)
    maps = np.stack([np.asarray(m, dtype=np.float64) for m in score_maps])
    gts = np.stack([np.asarray(m) > 0 for m in masks])
    try:
        image_auroc = roc_auc(image_scores, labels)
        pixel_auroc = roc_auc(maps.ravel(), gts.ravel())
        pro = pro_score(list(maps), list(gts), fpr_limit, max_thresholds)
        pixel_ap = average_precision(maps.ravel(), gts.ravel())
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(
            f"{exc} (test set: {len(labels)} images, {int(labels.sum())} anomalous, "
            f"{int(gts.sum())} anomalous pixels)"
        ) from exc
    return EvalReport(
        image_auroc=image_auroc,
        pixel_auroc=pixel_auroc,
        pro=pro,
        pixel_ap=pixel_ap,
        n_images=int(labels.size),
        n_anomalous=int(labels.sum()),
        n_pixels=int(gts.size),
        fpr_limit=fpr_limit,
        anomalous_pixel_rate=float(gts.mean()),
    )


def evaluate(model, test_set, top_k: Optional[int] = None, fpr_limit: float = 0.3, max_thresholds: Optional[int] = None):
    """Score every test item and build the report.

    Args:
        model: anything with ``score_images(images) -> (N, H, W)`` maps in [0, 1];
            its ``config.image_top_k`` is used when ``top_k`` is not given.
        test_set: sequence of items with ``image_id``, ``image``, ``mask``, ``label``.

    Returns:
        (EvalReport, list of ImageScore, score maps array)
    """
    from .model import image_score

    items = list(test_set)
    if not items:
        raise UndefinedMetricError("empty test set")
    k = top_k if top_k is not None else model.config.image_top_k
    maps = model.score_images(np.stack([it.image for it in items]))
    scores = [image_score(m, k) for m in maps]
    labels = [int(it.label) for it in items]
    report = report_from_scores(labels, scores, list(maps), [it.mask for it in items], fpr_limit, max_thresholds)
    rows = [ImageScore(it.image_id, lab, s) for it, lab, s in zip(items, labels, scores)]
    return report, rows, maps


def write_scores_csv(rows: Sequence[ImageScore], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "label", "score"])
        for r in rows:
            writer.writerow([r.image_id, r.label, repr(float(r.score))])


def read_scores_csv(path) -> List[ImageScore]:
    with open(Path(path), newline="") as fh:
        return [ImageScore(r["image_id"], int(r["label"]), float(r["score"])) for r in csv.DictReader(fh)]
