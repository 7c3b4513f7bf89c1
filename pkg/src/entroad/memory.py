"""Memory-guided retrieval branch.

Per-layer linear projections map patch features into a retrieval space
where a bank of labeled prototype keys scores each patch: similarities to
the keys are quantile-filtered, softmax-weighted, and multiplied by the
prototypes' normal/anomaly value vectors to give a per-patch anomaly
pseudo-probability. An image-level key set provides a retrieval score for
whole images, and the per-patch probabilities of the deepest layer form
the base anomaly map.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bundle import FeatureBundle
from .errors import DataError, FormatError
from .maps import bilinear_resize, pool_mask_to_grid

BANK_MAGIC = b"EAMB"
BANK_VERSION = 1

MASK_LOGIT = -1e9  # stands in for -inf under the tape; exp() underflows to 0


@dataclass
class MemoryConfig:
    m_patches: int = 40
    m_images: int = 20
    quantile: float = 0.9
    seed: int = 0


@dataclass
class VisualProjection:
    """Trainable per-layer linear maps into the retrieval space."""

    layers: list[int]
    weights: dict[int, np.ndarray]  # layer -> (d, d_r)
    biases: dict[int, np.ndarray]   # layer -> (d_r,)

    @property
    def d_r(self) -> int:
        return self.weights[self.layers[0]].shape[1]

    @property
    def evidence_layer(self) -> int:
        return self.layers[-1]

    @staticmethod
    def init(layers: list[int], d: int, d_r: int, seed: int, dtype=np.float32) -> "VisualProjection":
        # small-norm init: the projected direction (all that survives the
        # L2 normalization) stays maximally responsive to optimizer steps
        rng = np.random.default_rng(seed)
        weights = {}
        biases = {}
        for layer in layers:
            weights[layer] = (0.02 * rng.normal(size=(d, d_r)) / np.sqrt(d)).astype(dtype)
            biases[layer] = np.zeros(d_r, dtype=dtype)
        return VisualProjection(layers=list(layers), weights=weights, biases=biases)


@dataclass
class MemoryBank:
    k_pat: np.ndarray  # (M, d_r), unit rows
    v_pat: np.ndarray  # (M, 2), rows on the simplex, columns [normal, anomaly]
    k_img: np.ndarray  # (M_img, d_r)
    v_img: np.ndarray  # (M_img, 2)
    quantile: float

    def validate(self) -> None:
        for name, keys in (("k_pat", self.k_pat), ("k_img", self.k_img)):
            norms = np.linalg.norm(keys, axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise DataError(f"{name} rows must be unit-norm")
        for name, vals in (("v_pat", self.v_pat), ("v_img", self.v_img)):
            if (vals < 0).any() or (vals > 1).any():
                raise DataError(f"{name} entries must lie in [0, 1]")
            if np.abs(vals.sum(axis=1) - 1.0).max() > 1e-6:
                raise DataError(f"{name} rows must sum to 1")
        if self.k_pat.shape[0] < 2:
            raise DataError("memory bank needs at least 2 patch prototypes")
        anomaly = self.v_pat[:, 1]
        if not ((anomaly > 0.5).any() and (anomaly < 0.5).any()):
            raise DataError("memory bank needs both classes among patch prototypes")


# -- projection ----------------------------------------------------------


def project_features(z, weight, bias):
    """r = l2-normalize(z @ W + b); accepts tape tensors or ndarrays."""
    return ad.l2_normalize(ad.add(ad.matmul(z, weight), bias), axis=-1)


def project_patches(bundle: FeatureBundle, proj: VisualProjection, layer: int) -> np.ndarray:
    if layer not in proj.weights:
        raise DataError(f"no projection for layer {layer}")
    z = bundle.features[layer].astype(np.float64)
    return project_features(z, proj.weights[layer].astype(np.float64), proj.biases[layer].astype(np.float64))


# -- bank construction ---------------------------------------------------


def _stratified_pick(rng: np.random.Generator, idx_pos: np.ndarray, idx_neg: np.ndarray, budget: int):
    """Sample up to `budget` indices, one class quota proportional to its share."""
    total = len(idx_pos) + len(idx_neg)
    n_pos = int(round(budget * len(idx_pos) / total))
    n_pos = min(max(n_pos, 1), budget - 1)
    n_pos = min(n_pos, len(idx_pos))
    n_neg = min(budget - n_pos, len(idx_neg))
    pick_pos = rng.choice(idx_pos, size=n_pos, replace=False)
    pick_neg = rng.choice(idx_neg, size=n_neg, replace=False)
    return pick_pos, pick_neg


def build_memory(bundles: list[FeatureBundle], proj: VisualProjection, cfg: MemoryConfig) -> MemoryBank:
    """Sample labeled prototypes from projected training patches.

    Patch labels come from max-pooling each mask to the grid; image keys are
    mean-pooled patch projections with the image label. Sampling is seeded
    and stratified so prototype class shares track the data's class shares.
    """
    layer = proj.evidence_layer
    patch_feats = []
    patch_labels = []
    img_feats = []
    img_labels = []
    for bundle in bundles:
        if bundle.mask is None or bundle.label is None:
            raise DataError(f"bundle {bundle.image_id} lacks the mask/label needed for memory building")
        r = project_patches(bundle, proj, layer)
        grid_label = pool_mask_to_grid(bundle.mask, bundle.grid).reshape(-1) > 0.5
        patch_feats.append(r)
        patch_labels.append(grid_label)
        pooled = r.mean(axis=0)
        img_feats.append(pooled / (np.linalg.norm(pooled) + 1e-12))
        img_labels.append(bundle.label)

    feats = np.concatenate(patch_feats, axis=0)
    labels = np.concatenate(patch_labels, axis=0)
    idx_pos = np.flatnonzero(labels)
    idx_neg = np.flatnonzero(~labels)
    if len(idx_pos) == 0 or len(idx_neg) == 0:
        raise DataError("memory bank needs both classes of training patches")

    rng = np.random.default_rng(cfg.seed)
    pick_pos, pick_neg = _stratified_pick(rng, idx_pos, idx_neg, cfg.m_patches)
    k_pat = np.concatenate([feats[pick_neg], feats[pick_pos]], axis=0)
    v_pat = np.concatenate(
        [
            np.tile([1.0, 0.0], (len(pick_neg), 1)),
            np.tile([0.0, 1.0], (len(pick_pos), 1)),
        ],
        axis=0,
    )

    img_feats_arr = np.stack(img_feats)
    img_labels_arr = np.asarray(img_labels, dtype=bool)
    i_pos = np.flatnonzero(img_labels_arr)
    i_neg = np.flatnonzero(~img_labels_arr)
    if len(i_pos) == 0 or len(i_neg) == 0:
        raise DataError("memory bank needs both classes of training images")
    ipick_pos, ipick_neg = _stratified_pick(rng, i_pos, i_neg, cfg.m_images)
    k_img = np.concatenate([img_feats_arr[ipick_neg], img_feats_arr[ipick_pos]], axis=0)
    v_img = np.concatenate(
        [
            np.tile([1.0, 0.0], (len(ipick_neg), 1)),
            np.tile([0.0, 1.0], (len(ipick_pos), 1)),
        ],
        axis=0,
    )

    bank = MemoryBank(
        k_pat=k_pat.astype(np.float64),
        v_pat=v_pat,
        k_img=k_img.astype(np.float64),
        v_img=v_img,
        quantile=cfg.quantile,
    )
    bank.validate()
    return bank


# -- scoring -------------------------------------------------------------


def _masked_softmax_rows(sims, quantile: float):
    """Row-wise softmax after masking entries below the row's quantile.

    The surviving set is decided on plain values, so under the tape the
    mask is a constant and gradients flow only through surviving entries.
    """
    values = ad.value_of(sims)
    if quantile > 0.0:
        cut = np.quantile(values, quantile, axis=-1, keepdims=True)
        keep = values >= cut
    else:
        keep = np.ones_like(values, dtype=bool)
    masked = ad.add(ad.mul(sims, keep), (MASK_LOGIT * ~keep).astype(values.dtype))
    return ad.softmax(masked, axis=-1)


def evidence_from_projected(r, bank: MemoryBank):
    """Anomaly pseudo-probability per patch; tape-aware."""
    sims = ad.matmul(r, bank.k_pat.T)
    weights = _masked_softmax_rows(sims, bank.quantile)
    response = ad.matmul(weights, bank.v_pat)
    selector = np.asarray([0.0, 1.0], dtype=bank.v_pat.dtype)
    return ad.matmul(response, selector)


def patch_evidence(r: np.ndarray, bank: MemoryBank) -> np.ndarray:
    bank.validate()
    return np.asarray(evidence_from_projected(np.asarray(r, dtype=np.float64), bank))


def retrieval_score_from_projected(r, bank: MemoryBank):
    pooled = ad.l2_normalize(ad.mean_(r, axis=0), axis=-1)
    sims = ad.matmul(pooled, bank.k_img.T)
    weights = ad.softmax(sims, axis=-1)
    response = ad.matmul(weights, bank.v_img)
    selector = np.asarray([0.0, 1.0], dtype=bank.v_img.dtype)
    return ad.matmul(response, selector)


def image_retrieval_score(bundle: FeatureBundle, proj: VisualProjection, bank: MemoryBank) -> float:
    r = project_patches(bundle, proj, proj.evidence_layer)
    return float(ad.value_of(retrieval_score_from_projected(r, bank)))


def base_anomaly_map(bundle: FeatureBundle, proj: VisualProjection, bank: MemoryBank) -> np.ndarray:
    """Patch evidence of the deepest layer, upsampled to image resolution."""
    r = project_patches(bundle, proj, proj.evidence_layer)
    p = patch_evidence(np.asarray(r), bank)
    grid = p.reshape(bundle.grid)
    return bilinear_resize(grid, bundle.image_size)


# -- serialization -------------------------------------------------------


def write_bank(bank: MemoryBank, path) -> None:
    bank.validate()
    header = {
        "M": int(bank.k_pat.shape[0]),
        "M_img": int(bank.k_img.shape[0]),
        "d_r": int(bank.k_pat.shape[1]),
        "q": float(bank.quantile),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<H", BANK_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (bank.k_pat, bank.v_pat, bank.k_img, bank.v_img):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        if fh.read(4) != BANK_MAGIC:
            raise FormatError(f"{path}: not a memory bank file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != BANK_VERSION:
            raise FormatError(f"{path}: unsupported bank version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        m, m_img, d_r = header["M"], header["M_img"], header["d_r"]

        def _arr(shape):
            count = int(np.prod(shape))
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(f"{path}: truncated bank tensor")
            return np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64)

        bank = MemoryBank(
            k_pat=_arr((m, d_r)),
            v_pat=_arr((m, 2)),
            k_img=_arr((m_img, d_r)),
            v_img=_arr((m_img, 2)),
            quantile=float(header["q"]),
        )
    # f32 round-trip can leave unit norms 1e-7 off; renormalize exactly
    bank.k_pat /= np.linalg.norm(bank.k_pat, axis=1, keepdims=True)
    bank.k_img /= np.linalg.norm(bank.k_img, axis=1, keepdims=True)
    bank.validate()
    return bank
