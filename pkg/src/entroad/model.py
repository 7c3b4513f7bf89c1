"""Full model state and the forward passes shared by training and inference."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .bundle import FeatureBundle
from .config import TrainConfig
from .entropy import compute_entropy_map
from .errors import ConfigError, DataError, FormatError
from .maps import bilinear_resize
from .memory import (
    MemoryBank,
    VisualProjection,
    evidence_from_projected,
    project_patches,
    read_bank,
    retrieval_score_from_projected,
    write_bank,
)
from .prompt import (
    BranchAdapter,
    PromptLearner,
    TextEncoderSpec,
    branch_bias,
    encode_prompt,
    similarity_maps,
    synthesize_prompts,
)
from .routing import RoutedTokens, RoutingConfig, route_features

CKPT_MAGIC = b"EAMD"
CKPT_VERSION = 1

# sub-seeds for the independently initialized trainable components
_SEED_PROJ, _SEED_LEARNER, _SEED_ADAPTER_A, _SEED_ADAPTER_B = range(4)

# frozen pieces (class embeddings, toy text encoder, alignment projection)
# mirror a shared pretrained encoder: one fixed geometry for every run
_FROZEN_TEXT_SEED = 0x7E47_EADB
_FROZEN_ALIGN_SEED = 0xA119_EADB


def component_seed(seed: int, component: int) -> int:
    return int(np.random.SeedSequence([seed, component]).generate_state(1)[0])


@dataclass
class EntroADModel:
    projections: VisualProjection
    bank: MemoryBank
    learner: PromptLearner
    adapter_a: BranchAdapter
    adapter_b: BranchAdapter
    text: TextEncoderSpec
    align: Optional[np.ndarray]  # (d, d_t) fixed map; None when d == d_t
    config: TrainConfig
    d: int

    @property
    def routing_config(self) -> RoutingConfig:
        cfg = self.config
        return RoutingConfig(
            temperature=cfg.temperature,
            tau=cfg.tau,
            k0=cfg.k0,
            k1=cfg.k1,
            agg_layer=cfg.resolved_agg_layer,
            gate_enabled=cfg.gate_enabled,
        )


def init_model_state(cfg: TrainConfig, d: int):
    """Initialize the Stage-2 trainable state plus the fixed text/alignment maps."""
    learner = PromptLearner.init(
        cfg.n_context,
        cfg.d_t,
        context_seed=component_seed(cfg.seed, _SEED_LEARNER),
        class_seed=_FROZEN_TEXT_SEED,
    )
    adapter_a = BranchAdapter.init(
        d, cfg.d_t, component_seed(cfg.seed, _SEED_ADAPTER_A), hidden=cfg.adapter_hidden
    )
    adapter_b = BranchAdapter.init(
        d, cfg.d_t, component_seed(cfg.seed, _SEED_ADAPTER_B), hidden=cfg.adapter_hidden
    )
    text = TextEncoderSpec.toy(cfg.d_t, _FROZEN_TEXT_SEED + 1)
    if d == cfg.d_t:
        align = None
    else:
        rng = np.random.default_rng(_FROZEN_ALIGN_SEED)
        align = (rng.normal(size=(d, cfg.d_t)) / np.sqrt(d)).astype(np.float32)
    return learner, adapter_a, adapter_b, text, align


def init_projection(cfg: TrainConfig, d: int) -> VisualProjection:
    return VisualProjection.init(cfg.layers, d, cfg.d_r, component_seed(cfg.seed, _SEED_PROJ))


# -- forward helpers -------------------------------------------------------


def aligned_features(model_or_align, bundle: FeatureBundle, layer: int) -> np.ndarray:
    align = model_or_align.align if isinstance(model_or_align, EntroADModel) else model_or_align
    z = bundle.features[layer].astype(np.float64)
    return z if align is None else z @ np.asarray(align, dtype=np.float64)


def patch_probability(model: EntroADModel, bundle: FeatureBundle) -> np.ndarray:
    r = project_patches(bundle, model.projections, model.projections.evidence_layer)
    return np.asarray(evidence_from_projected(r, model.bank))


def branch_layer_maps(aligned, tokens, learner, adapter, text, tau_s, prompt_ids=None):
    """Per-layer (anomaly, normal) similarity vectors for one branch.

    `aligned` maps layer id -> (N, d_t) features. With a precomputed text
    encoder the bias pathway is unavailable, so embeddings come straight
    from the table via `prompt_ids` = (normal_id, anomaly_id).
    """
    if text.mode == "precomputed":
        if prompt_ids is None:
            raise ConfigError("precomputed text mode requires prompt ids")
        u_n = encode_prompt(text, prompt_ids[0])
        u_a = encode_prompt(text, prompt_ids[1])
    else:
        bias = branch_bias(tokens.t_n, tokens.t_a, adapter)
        prompt_n, prompt_a = synthesize_prompts(learner, bias)
        u_n = encode_prompt(text, prompt_n)
        u_a = encode_prompt(text, prompt_a)
    out = []
    for layer, z in aligned.items():
        s_n, s_a = similarity_maps(z, u_n, u_a, tau_s)
        out.append((layer, s_a, s_n))
    return out


def branch_anomaly_map(
    bundle: FeatureBundle,
    model: EntroADModel,
    branch: str,
    map_layers: Optional[list[int]] = None,
    tokens: Optional[RoutedTokens] = None,
    prompt_ids=None,
) -> np.ndarray:
    """Layer-averaged anomaly probabilities, upsampled to image resolution."""
    if branch not in ("A", "B"):
        raise ConfigError(f"branch must be 'A' or 'B', got {branch!r}")
    layers = map_layers if map_layers is not None else model.config.resolved_map_layers
    if tokens is None:
        tokens = compute_tokens(model, bundle)
    aligned = {l: aligned_features(model, bundle, l) for l in layers}
    adapter = model.adapter_a if branch == "A" else model.adapter_b
    stacks = branch_layer_maps(
        aligned, tokens, model.learner, adapter, model.text, model.config.tau_s, prompt_ids
    )
    mean_sa = np.mean([ad.value_of(s_a) for _, s_a, _ in stacks], axis=0)
    return bilinear_resize(mean_sa.reshape(bundle.grid), bundle.image_size)


def compute_tokens(model: EntroADModel, bundle: FeatureBundle) -> RoutedTokens:
    emap = compute_entropy_map(bundle, model.config.layers)
    p = patch_probability(model, bundle)
    z = bundle.features[model.config.resolved_agg_layer].astype(np.float64)
    return route_features(z, p, emap.normalized, model.routing_config)


def retrieval_score(model: EntroADModel, bundle: FeatureBundle) -> float:
    r = project_patches(bundle, model.projections, model.projections.evidence_layer)
    return float(ad.value_of(retrieval_score_from_projected(r, model.bank)))


# -- checksums --------------------------------------------------------------


def frozen_checksum(proj: VisualProjection, bank: MemoryBank) -> str:
    """Digest of all Stage-1 state; Stage-2 training must not change it."""
    h = hashlib.sha256()
    for layer in proj.layers:
        h.update(np.ascontiguousarray(proj.weights[layer]).tobytes())
        h.update(np.ascontiguousarray(proj.biases[layer]).tobytes())
    for arr in (bank.k_pat, bank.v_pat, bank.k_img, bank.v_img):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- checkpoint serialization ------------------------------------------------


def _model_tensors(model: EntroADModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for layer in model.projections.layers:
        out.append((f"proj.{layer}.weight", model.projections.weights[layer]))
        out.append((f"proj.{layer}.bias", model.projections.biases[layer]))
    out.append(("learner.context", model.learner.context))
    out.append(("learner.class_normal", model.learner.class_embed_normal))
    out.append(("learner.class_anomaly", model.learner.class_embed_anomaly))
    for name, adapter in (("adapter_a", model.adapter_a), ("adapter_b", model.adapter_b)):
        out.append((f"{name}.w1", adapter.w1))
        out.append((f"{name}.b1", adapter.b1))
        out.append((f"{name}.w2", adapter.w2))
        out.append((f"{name}.b2", adapter.b2))
    out.append(("text.projection", model.text.projection))
    out.append(("text.mixer", model.text.mixer))
    if model.align is not None:
        out.append(("align", model.align))
    return out


def bank_path_for(path) -> Path:
    return Path(path).with_suffix(".eamb")


def save_model(model: EntroADModel, path, config_hash: Optional[str] = None) -> None:
    """Write the checkpoint plus the sibling memory-bank file."""
    tensors = _model_tensors(model)
    header = {
        "d": model.d,
        "config": model.config.to_dict(),
        "config_hash": config_hash or model.config.hash(),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    write_bank(model.bank, bank_path_for(path))


def load_model(path) -> EntroADModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    from .config import config_from_dict

    cfg = config_from_dict(header["config"])
    d = int(header["d"])
    proj = VisualProjection(
        layers=list(cfg.layers),
        weights={l: tensors[f"proj.{l}.weight"] for l in cfg.layers},
        biases={l: tensors[f"proj.{l}.bias"] for l in cfg.layers},
    )
    learner = PromptLearner(
        context=tensors["learner.context"],
        class_embed_normal=tensors["learner.class_normal"],
        class_embed_anomaly=tensors["learner.class_anomaly"],
    )
    adapter_a = BranchAdapter(
        w1=tensors["adapter_a.w1"], b1=tensors["adapter_a.b1"],
        w2=tensors["adapter_a.w2"], b2=tensors["adapter_a.b2"],
    )
    adapter_b = BranchAdapter(
        w1=tensors["adapter_b.w1"], b1=tensors["adapter_b.b1"],
        w2=tensors["adapter_b.w2"], b2=tensors["adapter_b.b2"],
    )
    text = TextEncoderSpec(
        mode="toy", projection=tensors["text.projection"], mixer=tensors["text.mixer"]
    )
    bank_file = bank_path_for(path)
    if not bank_file.exists():
        raise DataError(f"missing memory bank file {bank_file}")
    bank = read_bank(bank_file)
    return EntroADModel(
        projections=proj,
        bank=bank,
        learner=learner,
        adapter_a=adapter_a,
        adapter_b=adapter_b,
        text=text,
        align=tensors.get("align"),
        config=cfg,
        d=d,
    )
