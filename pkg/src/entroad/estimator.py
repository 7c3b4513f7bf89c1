"""Scikit-learn-style front door for the whole pipeline.

`EntroADDetector` is a supervised estimator over feature bundles: `fit`
runs both training stages, `predict` returns image-level anomaly scores,
`transform` returns pixel-level anomaly maps, and `score` is the image
AUROC on labeled bundles. All hyperparameters are constructor arguments
so the detector composes with sklearn model-selection tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .bundle import FeatureBundle, validate_bundle
from .config import TrainConfig
from .errors import DataError
from .inference import infer
from .metrics import auroc
from .training import train


def check_bundles(X, require_labels: bool = False) -> list[FeatureBundle]:
    """Validate an iterable of feature bundles before use."""
    bundles = list(X)
    if not bundles:
        raise DataError("expected at least one feature bundle")
    for item in bundles:
        if not isinstance(item, FeatureBundle):
            raise DataError(f"expected FeatureBundle, got {type(item).__name__}")
        validate_bundle(item)
        if require_labels and (item.label is None or item.mask is None):
            raise DataError(f"bundle {item.image_id} lacks label/mask")
    return bundles


class EntroADDetector(BaseEstimator):
    def __init__(
        self,
        lr=4e-4,
        batch_size=8,
        epochs_stage1=1,
        epochs_stage2=5,
        seed=0,
        layers=None,
        map_layers=None,
        d_r=768,
        d_t=768,
        n_context=12,
        m_patches=512,
        m_images=64,
        quantile=0.9,
        temperature=0.1,
        tau=0.5,
        k0=5.0,
        k1=50.0,
        gate_enabled=True,
        tau_s=0.07,
        alpha_f=0.25,
        gamma=2.0,
        lambda_d=1.0,
        lambda_a=0.7,
        lambda_b=0.3,
        sigma=4.0,
        top_fraction=0.01,
        score_balance=0.7,
        prior="structured",
    ):
        self.lr = lr
        self.batch_size = batch_size
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.seed = seed
        self.layers = layers
        self.map_layers = map_layers
        self.d_r = d_r
        self.d_t = d_t
        self.n_context = n_context
        self.m_patches = m_patches
        self.m_images = m_images
        self.quantile = quantile
        self.temperature = temperature
        self.tau = tau
        self.k0 = k0
        self.k1 = k1
        self.gate_enabled = gate_enabled
        self.tau_s = tau_s
        self.alpha_f = alpha_f
        self.gamma = gamma
        self.lambda_d = lambda_d
        self.lambda_a = lambda_a
        self.lambda_b = lambda_b
        self.sigma = sigma
        self.top_fraction = top_fraction
        self.score_balance = score_balance
        self.prior = prior

    def _config(self, d_example: FeatureBundle) -> TrainConfig:
        layers = self.layers if self.layers is not None else list(d_example.layers)
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs_stage1=self.epochs_stage1,
            epochs_stage2=self.epochs_stage2,
            seed=self.seed,
            layers=list(layers),
            map_layers=list(self.map_layers) if self.map_layers is not None else None,
            d_r=self.d_r,
            d_t=self.d_t,
            n_context=self.n_context,
            m_patches=self.m_patches,
            m_images=self.m_images,
            quantile=self.quantile,
            temperature=self.temperature,
            tau=self.tau,
            k0=self.k0,
            k1=self.k1,
            gate_enabled=self.gate_enabled,
            tau_s=self.tau_s,
            alpha_f=self.alpha_f,
            gamma=self.gamma,
            lambda_d=self.lambda_d,
            lambda_a=self.lambda_a,
            lambda_b=self.lambda_b,
            sigma=self.sigma,
            top_fraction=self.top_fraction,
            score_balance=self.score_balance,
        )

    def fit(self, X, y=None):
        bundles = check_bundles(X, require_labels=True)
        cfg = self._config(bundles[0])
        cfg.validate()
        self.model_, self.history_ = train(bundles, cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This EntroADDetector instance is not fitted yet; call fit first."
            )

    def detect(self, X):
        """Full per-image results including maps and intermediates."""
        self._check_fitted()
        bundles = check_bundles(X)
        return [infer(b, self.model_, prior=self.prior) for b in bundles]

    def predict(self, X) -> np.ndarray:
        """Image-level anomaly scores in [0, 1]."""
        return np.asarray([r.score for r in self.detect(X)])

    def transform(self, X):
        """Pixel-level anomaly maps, stacked when shapes agree."""
        maps = [r.map for r in self.detect(X)]
        shapes = {m.shape for m in maps}
        return np.stack(maps) if len(shapes) == 1 else maps

    def score(self, X, y=None) -> float:
        """Image AUROC against bundle labels (or an explicit label vector)."""
        bundles = check_bundles(X)
        if y is None:
            y = [b.label for b in bundles]
            if any(label is None for label in y):
                raise DataError("score() needs labeled bundles or an explicit y")
        return auroc(self.predict(bundles), y)
