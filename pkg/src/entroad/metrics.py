"""Evaluation metrics: image AUROC/AP, pooled pixel AUROC, and AUPRO."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DataError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])  # 4-connectivity


@dataclass
class EvalReport:
    image_auroc: float
    image_ap: float
    pixel_auroc: float
    aupro: float
    n_images: int
    n_pixels: int
    n_regions: int

    def to_dict(self) -> dict:
        return {
            "image_auroc": self.image_auroc,
            "image_ap": self.image_ap,
            "pixel_auroc": self.pixel_auroc,
            "aupro": self.aupro,
            "counts": {
                "n_images": self.n_images,
                "n_pixels": self.n_pixels,
                "n_regions": self.n_regions,
            },
            "percent": {
                "image_auroc": round(100.0 * self.image_auroc, 1),
                "image_ap": round(100.0 * self.image_ap, 1),
                "pixel_auroc": round(100.0 * self.pixel_auroc, 1),
                "aupro": round(100.0 * self.aupro, 1),
            },
        }


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUROC: P(score+ > score-) + 0.5 P(score+ = score-)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both classes")
    ranks = rankdata(scores)  # average ranks resolve ties exactly
    pos_ranks = ranks[labels == 1].sum()
    return float((pos_ranks - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-interpolated AP with equal scores grouped into one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order].astype(np.float64)
    # last index of each tie group
    boundaries = np.flatnonzero(np.r_[np.diff(sorted_scores) != 0, True])
    tp = np.cumsum(sorted_labels)[boundaries]
    counts = boundaries + 1.0
    precision = tp / counts
    recall = tp / n_pos
    recall_steps = np.diff(np.r_[0.0, recall])
    return float((recall_steps * precision).sum())


def _region_profiles(maps, masks):
    regions = []
    normal_vals = []
    for anomaly_map, mask in zip(maps, masks):
        anomaly_map = np.asarray(anomaly_map, dtype=np.float64)
        mask = np.asarray(mask) > 0
        if anomaly_map.shape != mask.shape:
            raise DataError(f"map shape {anomaly_map.shape} != mask shape {mask.shape}")
        if mask.any():
            labeled, n_regions = ndimage.label(mask, structure=_CROSS)
            for rid in range(1, n_regions + 1):
                regions.append(np.sort(anomaly_map[labeled == rid]))
        normal_vals.append(anomaly_map[~mask])
    return regions, np.sort(np.concatenate(normal_vals))


def _frac_at_least(sorted_vals: np.ndarray, threshold: float) -> float:
    return (sorted_vals.size - np.searchsorted(sorted_vals, threshold, side="left")) / sorted_vals.size


def aupro(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    n_thresholds: int = 200,
) -> float:
    """Area under the per-region-overlap curve up to an FPR cap.

    Regions are 4-connected mask components; thresholds are quantile-spaced
    over the pooled map values; the PRO-vs-FPR polyline is integrated by
    trapezoid up to `fpr_limit` and normalized by it.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise DataError("fpr_limit must lie in (0, 1]")
    regions, normal_sorted = _region_profiles(maps, masks)
    if not regions:
        raise DataError("AUPRO needs at least one anomalous region")
    if normal_sorted.size == 0:
        raise DataError("AUPRO needs at least one normal pixel")

    pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    qs = np.linspace(0.0, 1.0, n_thresholds)
    thresholds = np.unique(np.quantile(pooled, qs, method="lower"))[::-1]

    fprs = [0.0]
    pros = [0.0]
    for thr in thresholds:
        pro = float(np.mean([_frac_at_least(vals, thr) for vals in regions]))
        fpr = _frac_at_least(normal_sorted, thr)
        fprs.append(fpr)
        pros.append(pro)
    return _integrate_to_limit(np.asarray(fprs), np.asarray(pros), fpr_limit)


def _integrate_to_limit(fprs: np.ndarray, pros: np.ndarray, limit: float) -> float:
    """Trapezoid integral of the (fpr, pro) polyline over [0, limit], / limit."""
    cross = int(np.argmax(fprs >= limit))
    if fprs[cross] == limit:
        xs = fprs[: cross + 1]
        ys = pros[: cross + 1]
    else:
        span = fprs[cross] - fprs[cross - 1]
        t = (limit - fprs[cross - 1]) / span
        y_at = pros[cross - 1] + t * (pros[cross] - pros[cross - 1])
        xs = np.r_[fprs[:cross], limit]
        ys = np.r_[pros[:cross], y_at]
    return float(np.trapezoid(ys, xs) / limit)


def evaluate(results, bundles) -> EvalReport:
    """Compose all metrics over paired predictions and ground truth.

    `results` needs `.score` and `.map` per item; bundles provide labels
    and masks. Pixel metrics pool pixels across the whole set.
    """
    if len(results) != len(bundles):
        raise DataError(f"{len(results)} predictions vs {len(bundles)} bundles")
    scores = []
    labels = []
    maps = []
    masks = []
    for res, bundle in zip(results, bundles):
        if bundle.label is None or bundle.mask is None:
            raise DataError(f"bundle {bundle.image_id} lacks evaluation labels")
        scores.append(res.score)
        labels.append(bundle.label)
        maps.append(np.asarray(res.map, dtype=np.float64))
        masks.append(bundle.mask)

    pixel_scores = np.concatenate([m.ravel() for m in maps])
    pixel_labels = np.concatenate([np.asarray(m).ravel() for m in masks])
    n_regions = sum(
        int(ndimage.label(np.asarray(m) > 0, structure=_CROSS)[1]) for m in masks
    )
    return EvalReport(
        image_auroc=auroc(scores, labels),
        image_ap=average_precision(scores, labels),
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        aupro=aupro(maps, masks),
        n_images=len(bundles),
        n_pixels=int(pixel_labels.size),
        n_regions=n_regions,
    )
