"""Evidence- and entropy-guided token routing with confidence gating.

Per-patch anomaly evidence and normalized attention entropy are combined
into two spatial softmax channels that aggregate patch features into one
normal token and one anomaly token. A sigmoid gate driven by the peak
evidence and the entropy spread suppresses the anomaly token when the
evidence is unreliable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bundle import FeatureBundle
from .entropy import EntropyMap
from .errors import ConfigError


@dataclass
class RoutingConfig:
    temperature: float = 0.1
    tau: float = 0.5
    k0: float = 5.0
    k1: float = 50.0
    agg_layer: int | None = None  # None -> deepest available layer
    gate_enabled: bool = True


@dataclass
class RoutedTokens:
    t_n: np.ndarray
    t_a_raw: np.ndarray
    t_a: np.ndarray
    g: float
    w_a: np.ndarray
    w_n: np.ndarray


def routing_weights(p, e_hat, temperature: float):
    """Spatial softmax weights for the anomaly and normal channels."""
    if temperature <= 0:
        raise ConfigError(f"router temperature must be positive, got {temperature}")
    logits_a = ad.div(ad.mul(p, e_hat), temperature)
    logits_n = ad.div(ad.mul(ad.sub(1.0, p), ad.sub(1.0, e_hat)), temperature)
    return ad.softmax(logits_a, axis=-1), ad.softmax(logits_n, axis=-1)


def aggregate_tokens(z, w_a, w_n):
    """Weighted sums of patch features: (anomaly token, normal token)."""
    return ad.matmul(w_a, z), ad.matmul(w_n, z)


def confidence_gate(p, e_hat, tau: float, k0: float, k1: float):
    """sigmoid((max evidence - tau) * (k0 + k1 * std of normalized entropy))."""
    p_values = ad.value_of(p)
    onehot = np.zeros_like(p_values)
    onehot[int(np.argmax(p_values))] = 1.0
    p_max = ad.sum_(ad.mul(p, onehot))
    centered = ad.sub(e_hat, ad.mean_(e_hat))
    sigma = ad.sqrt(ad.mean_(ad.mul(centered, centered)))
    return ad.sigmoid(ad.mul(ad.sub(p_max, tau), ad.add(k0, ad.mul(k1, sigma))))


def route(
    bundle: FeatureBundle,
    entropy_map: EntropyMap,
    p: np.ndarray,
    cfg: RoutingConfig,
) -> RoutedTokens:
    """Compose weighting, aggregation, and gating on one image."""
    layer = cfg.agg_layer if cfg.agg_layer is not None else bundle.layers[-1]
    z = bundle.features[layer].astype(np.float64)
    tokens = route_features(z, p, entropy_map.normalized, cfg)
    return tokens


def route_features(z, p, e_hat, cfg: RoutingConfig) -> RoutedTokens:
    w_a, w_n = routing_weights(p, e_hat, cfg.temperature)
    t_a_raw, t_n = aggregate_tokens(z, w_a, w_n)
    if cfg.gate_enabled:
        g = confidence_gate(p, e_hat, cfg.tau, cfg.k0, cfg.k1)
    else:
        g = 1.0
    t_a = ad.mul(g, t_a_raw)
    return RoutedTokens(
        t_n=t_n,
        t_a_raw=t_a_raw,
        t_a=t_a,
        g=g,
        w_a=w_a,
        w_n=w_n,
    )
