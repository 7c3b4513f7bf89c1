"""Patch-level attention entropy.

Each attention row, after removing the global token and re-normalizing,
is a distribution over patches; its Shannon entropy measures how dispersed
that patch's interactions are. Per-layer entropies are averaged over a
layer set and min-max scaled per image before they drive routing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import FeatureBundle
from .errors import DataError

EPS = 1e-8


@dataclass
class EntropyMap:
    raw: np.ndarray         # (N,), nats
    normalized: np.ndarray  # (N,), in [0, 1]
    layers_used: list[int]


def normalize_attention(attn: np.ndarray) -> np.ndarray:
    """Drop the global-token row/column and row-normalize what remains.

    All-zero rows map to the uniform distribution so downstream entropy
    stays finite and treats fully dispersed and undefined rows alike.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2 or attn.shape[0] != attn.shape[1] or attn.shape[0] < 2:
        raise DataError(f"attention must be square (N+1, N+1), got {attn.shape}")
    if (attn < 0).any():
        raise DataError("attention entries must be non-negative")
    spatial = attn[1:, 1:]
    sums = spatial.sum(axis=1, keepdims=True)
    out = spatial / (sums + EPS)
    zero_rows = sums[:, 0] == 0.0
    if zero_rows.any():
        out[zero_rows] = 1.0 / spatial.shape[1]
    return out


def layer_entropy(attn_norm: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row, in nats."""
    attn_norm = np.asarray(attn_norm, dtype=np.float64)
    ent = -(attn_norm * np.log(attn_norm + EPS)).sum(axis=1)
    # one-hot rows give -log(1 + eps) ~ -1e-8; clamp the epsilon artifact
    return np.maximum(ent, 0.0)


def structural_entropy(bundle: FeatureBundle, layers: list[int]) -> np.ndarray:
    """Per-patch entropy averaged over the given layers."""
    if not layers:
        raise DataError("layer set must be non-empty")
    missing = [l for l in layers if l not in bundle.attention]
    if missing:
        raise DataError(f"bundle {bundle.image_id} lacks layers {missing}")
    acc = np.zeros(bundle.n_patches)
    for layer in layers:
        acc += layer_entropy(normalize_attention(bundle.attention[layer]))
    return acc / len(layers)


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] per image; constant input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise DataError("cannot normalize an empty vector")
    lo = values.min()
    hi = values.max()
    return (values - lo) / (hi - lo + EPS)


def compute_entropy_map(bundle: FeatureBundle, layers: list[int]) -> EntropyMap:
    raw = structural_entropy(bundle, layers)
    return EntropyMap(raw=raw, normalized=minmax_normalize(raw), layers_used=list(layers))
