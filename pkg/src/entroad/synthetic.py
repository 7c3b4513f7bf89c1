"""Synthetic feature-bundle generator.

Stands in for a frozen vision backbone at desk scale. Normal images get
compact, distance-decayed local attention and a shared base feature
direction; anomalous images additionally carry a contiguous patch blob
whose features are shifted along a fixed anomaly direction and whose
attention rows are blended toward uniform, which raises their attention
entropy relative to normal patches.

Two ingredients keep the benchmark honest rather than linearly separable
from the start: patch features carry energy in a nuisance subspace that a
random projection mixes into retrieval similarities but a trained one can
suppress, and a configurable fraction of images carry a distractor blob
(novel random-direction features, disrupted attention, label unchanged),
i.e. structurally salient evidence that is not the learned anomaly type.

The world structure (per-layer directions, nuisance basis, attention
kernel) is derived from fixed internal seeds so that bundles generated
with different config seeds share one learnable distribution; the config
seed drives only per-image sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundle import FeatureBundle
from .errors import DataError

PATCH_PIXELS = 14          # mask upsampling is exact block replication
DEFAULT_LAYERS = (6, 12, 18, 24)

_WORLD_SEED = 0x5EED_EADB  # fixes the cross-seed feature geometry
_CLS_SHARE = 0.05          # attention mass each spatial row sends to [CLS]
_KERNEL_WIDTH = 0.8        # patches; controls how local normal attention is
_FEATURE_NOISE = 0.25
_NUISANCE_SCALE = 1.2      # energy a learned projection must filter out
_DISTRACTOR_AMPLITUDE = 0.6   # fraction of the true defect shift
_DISTRACTOR_TILT = (0.9, 1.5)  # radians away from the defect axis
_ATTENTION_JITTER = 0.1


@dataclass
class SyntheticConfig:
    n_images: int = 200
    grid: tuple[int, int] = (8, 8)
    d: int = 16
    anomaly_fraction: float = 0.5
    blob_radius: int = 2
    feature_shift: float = 3.0
    attention_disruption: float = 0.8
    distractor_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_images < 1:
            raise DataError("n_images must be >= 1")
        if self.d < 2:
            raise DataError("feature dimension must be >= 2")
        if self.blob_radius < 1:
            raise DataError("blob_radius must be >= 1")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise DataError("anomaly_fraction must lie in [0, 1]")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise DataError("distractor_fraction must lie in [0, 1]")


def _world_directions(d: int, layers: tuple[int, ...]) -> dict[int, dict[str, np.ndarray]]:
    """Per-layer geometry: orthonormal base direction, anomaly direction,
    and nuisance subspace."""
    rng = np.random.default_rng(_WORLD_SEED)
    out = {}
    n_nuisance = max(1, d // 3)
    for layer in layers:
        frame = rng.normal(size=(d, 2 + n_nuisance))
        frame, _ = np.linalg.qr(frame)
        out[layer] = {
            "base": frame[:, 0],
            "anom": frame[:, 1],
            "nuisance": frame[:, 2:],        # (d, n_nuisance)
        }
    return out


def _local_attention_kernel(h_p: int, w_p: int) -> np.ndarray:
    """Distance-decayed spatial attention, rows summing to 1."""
    rows = np.arange(h_p * w_p) // w_p
    cols = np.arange(h_p * w_p) % w_p
    d2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    kernel = np.exp(-d2 / (2.0 * _KERNEL_WIDTH**2))
    return kernel / kernel.sum(axis=1, keepdims=True)


def _blob_mask(h_p: int, w_p: int, center: tuple[int, int], radius: int) -> np.ndarray:
    rows = np.arange(h_p)[:, None]
    cols = np.arange(w_p)[None, :]
    d2 = (rows - center[0]) ** 2 + (cols - center[1]) ** 2
    return d2 <= radius**2


def gen_synthetic(cfg: SyntheticConfig, layers: tuple[int, ...] = DEFAULT_LAYERS) -> list[FeatureBundle]:
    """Generate a deterministic list of bundles from the config."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h_p, w_p = cfg.grid
    n = h_p * w_p
    height, width = PATCH_PIXELS * h_p, PATCH_PIXELS * w_p
    world = _world_directions(cfg.d, tuple(layers))
    base_kernel = _local_attention_kernel(h_p, w_p)

    n_anom = int(round(cfg.anomaly_fraction * cfg.n_images))
    anom_ids = set(rng.choice(cfg.n_images, size=n_anom, replace=False).tolist())

    bundles = []
    for idx in range(cfg.n_images):
        anomalous = idx in anom_ids
        blob = np.zeros((h_p, w_p), dtype=bool)
        if anomalous:
            center = (int(rng.integers(0, h_p)), int(rng.integers(0, w_p)))
            blob = _blob_mask(h_p, w_p, center, cfg.blob_radius)
        blob_flat = blob.reshape(-1)

        distract = np.zeros(n, dtype=bool)
        if rng.random() < cfg.distractor_fraction:
            center = (int(rng.integers(0, h_p)), int(rng.integers(0, w_p)))
            distract = _blob_mask(h_p, w_p, center, 1).reshape(-1)
            distract &= ~blob_flat
        # per-image distractor tilt: a weak mix of the defect axis with an
        # arbitrary stray direction, never strong enough to read as a defect
        phi = rng.uniform(*_DISTRACTOR_TILT)
        stray_raw = rng.normal(size=cfg.d)

        features = {}
        attention = {}
        for layer in layers:
            dirs = world[layer]
            n_nuis = dirs["nuisance"].shape[1]
            z = (
                dirs["base"][None, :]
                + _FEATURE_NOISE * rng.normal(size=(n, cfg.d))
                + _NUISANCE_SCALE * rng.normal(size=(n, n_nuis)) @ dirs["nuisance"].T
            )
            if anomalous:
                z[blob_flat] += cfg.feature_shift * dirs["anom"][None, :]
            if distract.any():
                stray = stray_raw - (stray_raw @ dirs["anom"]) * dirs["anom"]
                stray -= (stray @ dirs["base"]) * dirs["base"]
                stray /= np.linalg.norm(stray)
                look_alike = np.cos(phi) * dirs["anom"] + np.sin(phi) * stray
                z[distract] += _DISTRACTOR_AMPLITUDE * cfg.feature_shift * look_alike[None, :]
            features[layer] = z.astype(np.float32)

            spatial = base_kernel * (1.0 + _ATTENTION_JITTER * rng.random(size=(n, n)))
            spatial /= spatial.sum(axis=1, keepdims=True)
            disrupted = blob_flat | distract
            if disrupted.any() and cfg.attention_disruption > 0:
                delta = cfg.attention_disruption
                spatial[disrupted] = (1 - delta) * spatial[disrupted] + delta / n

            att = np.empty((n + 1, n + 1))
            att[0, 0] = _CLS_SHARE
            att[0, 1:] = (1 - _CLS_SHARE) / n
            att[1:, 0] = _CLS_SHARE
            att[1:, 1:] = (1 - _CLS_SHARE) * spatial
            att /= att.sum(axis=1, keepdims=True)
            attention[layer] = att.astype(np.float32)

        mask = np.kron(blob.astype(np.uint8), np.ones((PATCH_PIXELS, PATCH_PIXELS), dtype=np.uint8))
        bundles.append(
            FeatureBundle(
                image_id=f"synth-{cfg.seed}-{idx:05d}",
                grid=(h_p, w_p),
                image_size=(height, width),
                layers=list(layers),
                features=features,
                attention=attention,
                label=int(anomalous),
                mask=mask,
            )
        )
    return bundles


def blob_patches(bundle: FeatureBundle) -> np.ndarray:
    """Boolean patch-grid mask recovered from the pixel mask (max over blocks)."""
    if bundle.mask is None:
        return np.zeros(bundle.grid, dtype=bool)
    h_p, w_p = bundle.grid
    blocks = bundle.mask.reshape(h_p, PATCH_PIXELS, w_p, PATCH_PIXELS)
    return blocks.max(axis=(1, 3)).astype(bool)
