"""End-to-end inference: branch maps, smoothing, fusion, and scoring."""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import ceil, floor
from typing import Optional

import numpy as np

from .bundle import FeatureBundle
from .errors import ConfigError
from .model import EntroADModel, branch_anomaly_map, compute_tokens, retrieval_score

EPS = 1e-8

PRIORS = ("structured", "diffuse")


@dataclass
class AnomalyResult:
    image_id: str
    map: np.ndarray      # (H, W) fused, smoothed, in [0, 1]
    score: float         # in [0, 1]
    a_loc: float
    a_ret: float
    map_a: np.ndarray    # smoothed branch maps, as scored
    map_b: np.ndarray
    gate: float


def fuse_maps(map_a: np.ndarray, map_b: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Normalized-weight blend of the two branch maps."""
    if alpha < 0 or beta < 0:
        raise ConfigError("fusion weights must be non-negative")
    if alpha + beta <= 0:
        raise ConfigError("at least one fusion weight must be positive")
    if map_a.shape != map_b.shape:
        raise ConfigError(f"branch map shapes differ: {map_a.shape} vs {map_b.shape}")
    denom = alpha + beta + EPS
    return (alpha / denom) * map_a + (beta / denom) * map_b


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _pad_reflect(arr: np.ndarray, pad: int, axis: int) -> np.ndarray:
    # np.pad symmetric caps the pad at the axis length; loop for tiny maps
    while pad > 0:
        step = min(pad, arr.shape[axis])
        width = [(0, 0)] * arr.ndim
        width[axis] = (step, step)
        arr = np.pad(arr, width, mode="symmetric")
        pad -= step
    return arr


def gaussian_smooth(values: np.ndarray, sigma: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with edge-reflecting padding, clamped to [0, 1]."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    kernel = _gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2
    out = np.asarray(values, dtype=np.float64)
    for axis in range(2):
        padded = _pad_reflect(out, radius, axis)
        out = np.apply_along_axis(
            lambda row: np.convolve(row, kernel, mode="valid"), axis, padded
        )
    return np.clip(out, 0.0, 1.0)


def topk_score(values: np.ndarray, fraction: float = 0.01) -> float:
    """Mean of the top `fraction` of map values (at least one value)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    count = max(1, floor(fraction * flat.size))
    top = np.partition(flat, flat.size - count)[flat.size - count:]
    return float(top.mean())


def image_score(a_loc: float, a_ret: float, balance: float = 0.7) -> float:
    """Blend the localization and retrieval scores; `balance` weights retrieval."""
    if not 0.0 <= balance <= 1.0:
        raise ConfigError("balance must lie in [0, 1]")
    return (1.0 - balance) * a_loc + balance * a_ret


def fusion_weights(cfg, prior: str) -> tuple[float, float]:
    if prior == "structured":
        return cfg.alpha_structured, cfg.beta_structured
    if prior == "diffuse":
        return cfg.alpha_diffuse, cfg.beta_diffuse
    raise ConfigError(f"prior must be one of {PRIORS}, got {prior!r}")


def infer(
    bundle: FeatureBundle,
    model: EntroADModel,
    prior: str = "structured",
    prompt_ids=None,
    gate_enabled: Optional[bool] = None,
) -> AnomalyResult:
    """Full inference pass: retrieval, routing, branch maps, fusion, scoring.

    `gate_enabled` overrides the trained configuration (used by ablations);
    branch maps are smoothed before fusion so the reported per-branch maps
    match what the fused score saw.
    """
    cfg = model.config
    if gate_enabled is not None and gate_enabled != cfg.gate_enabled:
        model = replace(model, config=replace(cfg, gate_enabled=gate_enabled))
        cfg = model.config

    a_ret = retrieval_score(model, bundle)
    tokens = compute_tokens(model, bundle)
    map_a = branch_anomaly_map(bundle, model, "A", tokens=tokens, prompt_ids=prompt_ids)
    map_b = branch_anomaly_map(bundle, model, "B", tokens=tokens, prompt_ids=prompt_ids)
    map_a = gaussian_smooth(map_a, cfg.sigma)
    map_b = gaussian_smooth(map_b, cfg.sigma)
    alpha, beta = fusion_weights(cfg, prior)
    fused = fuse_maps(map_a, map_b, alpha, beta)
    a_loc = topk_score(fused, cfg.top_fraction)
    score = image_score(a_loc, a_ret, cfg.score_balance)
    return AnomalyResult(
        image_id=bundle.image_id,
        map=fused,
        score=score,
        a_loc=a_loc,
        a_ret=a_ret,
        map_a=map_a,
        map_b=map_b,
        gate=float(tokens.g),
    )
