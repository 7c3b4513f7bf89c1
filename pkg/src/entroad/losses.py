"""Training objectives: image-level BCE, focal + Dice segmentation terms,
and the two stage objectives built from them.

All functions accept plain arrays or tape tensors, so the same code backs
inference-side diagnostics and the differentiable training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError

EPS = 1e-8


@dataclass
class LossConfig:
    alpha_f: float = 0.25
    gamma: float = 2.0
    lambda_d: float = 1.0
    lambda_a: float = 0.7
    lambda_b: float = 0.3

    def validate(self) -> None:
        if not 0.0 < self.alpha_f < 1.0:
            raise ConfigError("alpha_f must lie in (0, 1)")
        if self.gamma < 0 or self.lambda_d < 0 or self.lambda_a < 0 or self.lambda_b < 0:
            raise ConfigError("gamma and loss weights must be non-negative")
        if self.lambda_a + self.lambda_b <= 0:
            raise ConfigError("at least one branch weight must be positive")


def _check_shapes(pred, target) -> None:
    ps, ts = ad.value_of(pred).shape, np.asarray(target).shape
    if ps != ts:
        raise DataError(f"prediction shape {ps} != target shape {ts}")


def bce_image(a_hat, y):
    """Binary cross-entropy on the image-level anomaly probability."""
    pos = ad.mul(float(y), ad.log(ad.add(a_hat, EPS)))
    neg = ad.mul(1.0 - float(y), ad.log(ad.add(ad.sub(1.0, a_hat), EPS)))
    return ad.sub(0.0, ad.add(pos, neg))


def focal(pred, target, alpha_f: float, gamma: float):
    """Class-balanced focusing loss, averaged over all pixels."""
    _check_shapes(pred, target)
    target = np.asarray(target, dtype=ad.value_of(pred).dtype)
    pos = ad.mul(
        alpha_f * target,
        ad.mul(ad.power(ad.sub(1.0, pred), gamma), ad.log(ad.add(pred, EPS))),
    )
    neg = ad.mul(
        (1.0 - alpha_f) * (1.0 - target),
        ad.mul(ad.power(pred, gamma), ad.log(ad.add(ad.sub(1.0, pred), EPS))),
    )
    return ad.sub(0.0, ad.mean_(ad.add(pos, neg)))


def dice(pred, target):
    """Soft Dice loss: 1 - 2|pred * target| / (|pred| + |target|)."""
    _check_shapes(pred, target)
    target = np.asarray(target, dtype=ad.value_of(pred).dtype)
    inter = ad.sum_(ad.mul(pred, target))
    denom = ad.add(ad.sum_(pred), float(target.sum()))
    return ad.sub(1.0, ad.div(ad.add(ad.mul(2.0, inter), EPS), ad.add(denom, EPS)))


def seg_loss(pred, target, cfg: LossConfig):
    return ad.add(
        focal(pred, target, cfg.alpha_f, cfg.gamma),
        ad.mul(cfg.lambda_d, dice(pred, target)),
    )


def stage1_loss(base_map, target, a_hat, y, cfg: LossConfig):
    """Segmentation loss on the base map plus image-level BCE."""
    return ad.add(seg_loss(base_map, target, cfg), bce_image(a_hat, y))


def branch_loss(layer_maps, target, cfg: LossConfig):
    """Sum over layers of focal + Dice on the anomaly map plus Dice on the
    normal map against the inverted target.

    `layer_maps` is a sequence of (anomaly_map, normal_map) pairs.
    """
    target = np.asarray(target)
    total = None
    for pred_a, pred_n in layer_maps:
        term = ad.add(
            ad.add(
                focal(pred_a, target, cfg.alpha_f, cfg.gamma),
                ad.mul(cfg.lambda_d, dice(pred_a, target)),
            ),
            ad.mul(cfg.lambda_d, dice(pred_n, 1.0 - target)),
        )
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise DataError("branch loss needs at least one layer map")
    return total


def stage2_loss(loss_a, loss_b, cfg: LossConfig):
    """Normalized weighted combination of the two branch losses."""
    cfg.validate()
    denom = cfg.lambda_a + cfg.lambda_b + EPS
    return ad.add(
        ad.mul(cfg.lambda_a / denom, loss_a),
        ad.mul(cfg.lambda_b / denom, loss_b),
    )
