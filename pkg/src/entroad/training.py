"""Two-stage training with a tape-backed gradient path.

Stage 1 fits the per-layer visual projections against segmentation plus
image-level supervision, with memory prototypes sampled from the initial
projections and rebuilt from the final ones. Stage 2 freezes all Stage-1
state and fits the prompt learner and both branch adapters; the routed
tokens entering the adapters are constants of the frozen modules.

Training runs in float32; gradient verification rebuilds the identical
graph in float64 and compares against central finite differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .bundle import FeatureBundle
from .config import TrainConfig
from .entropy import compute_entropy_map
from .errors import DataError, NumericalError
from .losses import LossConfig, branch_loss, stage1_loss, stage2_loss
from .maps import pool_mask_to_grid
from .memory import (
    MemoryBank,
    MemoryConfig,
    VisualProjection,
    build_memory,
    evidence_from_projected,
    project_features,
    retrieval_score_from_projected,
)
from .model import (
    EntroADModel,
    aligned_features,
    component_seed,
    frozen_checksum,
    init_model_state,
    init_projection,
)
from .prompt import BranchAdapter, PromptLearner, TextEncoderSpec
from .routing import RoutingConfig, route_features


@dataclass
class HistoryRow:
    stage: int
    epoch: int
    batch: int
    loss: float


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in sorted(params):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _loss_config(cfg: TrainConfig) -> LossConfig:
    return LossConfig(
        alpha_f=cfg.alpha_f,
        gamma=cfg.gamma,
        lambda_d=cfg.lambda_d,
        lambda_a=cfg.lambda_a,
        lambda_b=cfg.lambda_b,
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _require_supervision(bundles: Sequence[FeatureBundle]) -> None:
    labels = set()
    for b in bundles:
        if b.label is None or b.mask is None:
            raise DataError(f"bundle {b.image_id} lacks the label/mask required for training")
        labels.add(b.label)
    if labels != {0, 1}:
        raise DataError("training needs both normal and anomalous images")


def _cast_bank(bank: MemoryBank, dtype) -> MemoryBank:
    return MemoryBank(
        k_pat=bank.k_pat.astype(dtype),
        v_pat=bank.v_pat.astype(dtype),
        k_img=bank.k_img.astype(dtype),
        v_img=bank.v_img.astype(dtype),
        quantile=bank.quantile,
    )


# -- stage 1 ----------------------------------------------------------------


def _stage1_context(bundles: Sequence[FeatureBundle], layer: int, dtype) -> list[dict]:
    ctx = []
    for b in bundles:
        ctx.append(
            {
                "z": b.features[layer].astype(dtype),
                "y_grid": pool_mask_to_grid(b.mask, b.grid).astype(dtype),
                "label": int(b.label),
                "grid": b.grid,
            }
        )
    return ctx


def stage1_batch_loss(batch: Iterable[dict], params: dict, bank: MemoryBank, loss_cfg: LossConfig):
    """Mean Stage-1 objective over a batch; params may hold tape tensors."""
    total = None
    count = 0
    for item in batch:
        layer_key = item["layer_key"]
        r = project_features(item["z"], params[f"proj.{layer_key}.weight"], params[f"proj.{layer_key}.bias"])
        p = evidence_from_projected(r, bank)
        base_map = ad.reshape(p, item["grid"])
        a_ret = retrieval_score_from_projected(r, bank)
        loss = stage1_loss(base_map, item["y_grid"], a_ret, item["label"], loss_cfg)
        total = loss if total is None else ad.add(total, loss)
        count += 1
    return ad.div(total, float(count))


def train_stage1(
    bundles: Sequence[FeatureBundle],
    cfg: TrainConfig,
    dtype=np.float32,
) -> tuple[VisualProjection, MemoryBank, list[HistoryRow]]:
    _require_supervision(bundles)
    cfg.validate()
    d = bundles[0].d
    proj = init_projection(cfg, d)
    for layer in proj.layers:
        proj.weights[layer] = proj.weights[layer].astype(dtype)
        proj.biases[layer] = proj.biases[layer].astype(dtype)

    mem_cfg = MemoryConfig(
        m_patches=cfg.m_patches,
        m_images=cfg.m_images,
        quantile=cfg.quantile,
        seed=component_seed(cfg.seed, 101),
    )

    layer = proj.evidence_layer
    ctx = _stage1_context(bundles, layer, dtype)
    for item in ctx:
        item["layer_key"] = layer
    loss_cfg = _loss_config(cfg)
    params = {
        f"proj.{layer}.weight": proj.weights[layer],
        f"proj.{layer}.bias": proj.biases[layer],
    }
    optimizer = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[HistoryRow] = []

    for epoch in range(cfg.epochs_stage1):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        for batch_idx, indices in enumerate(_batches(len(ctx), cfg.batch_size, rng)):
            # the prototype keys track the current projections; each step
            # retrieves against a bank rebuilt from the same seeded sample
            proj.weights[layer] = params[f"proj.{layer}.weight"]
            proj.biases[layer] = params[f"proj.{layer}.bias"]
            bank = _cast_bank(build_memory(list(bundles), proj, mem_cfg), dtype)
            tensors = {name: ad.Tensor(arr, requires_grad=True) for name, arr in params.items()}
            loss = stage1_batch_loss([ctx[i] for i in indices], tensors, bank, loss_cfg)
            loss_value = float(ad.value_of(loss))
            if not np.isfinite(loss_value):
                raise NumericalError(f"non-finite stage-1 loss at epoch {epoch} batch {batch_idx}")
            loss.backward()
            grads = {name: t.grad for name, t in tensors.items()}
            optimizer.step(params, grads)
            history.append(HistoryRow(1, epoch, batch_idx, loss_value))

    proj.weights[layer] = params[f"proj.{layer}.weight"]
    proj.biases[layer] = params[f"proj.{layer}.bias"]
    bank = build_memory(list(bundles), proj, mem_cfg)
    return proj, bank, history


# -- stage 2 ----------------------------------------------------------------


def _stage2_context(
    bundles: Sequence[FeatureBundle],
    proj: VisualProjection,
    bank: MemoryBank,
    cfg: TrainConfig,
    align: Optional[np.ndarray],
    dtype,
) -> list[dict]:
    """Precompute every frozen quantity the Stage-2 graph consumes."""
    routing_cfg = RoutingConfig(
        temperature=cfg.temperature,
        tau=cfg.tau,
        k0=cfg.k0,
        k1=cfg.k1,
        agg_layer=cfg.resolved_agg_layer,
        gate_enabled=cfg.gate_enabled,
    )
    ctx = []
    for b in bundles:
        r = project_features(
            b.features[proj.evidence_layer].astype(np.float64),
            proj.weights[proj.evidence_layer].astype(np.float64),
            proj.biases[proj.evidence_layer].astype(np.float64),
        )
        p = np.asarray(evidence_from_projected(r, bank))
        emap = compute_entropy_map(b, cfg.layers)
        z_agg = b.features[cfg.resolved_agg_layer].astype(np.float64)
        tokens = route_features(z_agg, p, emap.normalized, routing_cfg)
        aligned = {
            layer: aligned_features(align, b, layer).astype(dtype)
            for layer in cfg.resolved_map_layers
        }
        ctx.append(
            {
                "t_n": np.asarray(tokens.t_n, dtype=dtype),
                "t_a": np.asarray(tokens.t_a, dtype=dtype),
                "aligned": aligned,
                "y_grid": pool_mask_to_grid(b.mask, b.grid).astype(dtype) if b.mask is not None else None,
                "grid": b.grid,
            }
        )
    return ctx


def _stage2_params(learner: PromptLearner, adapter_a: BranchAdapter, adapter_b: BranchAdapter) -> dict:
    return {
        "learner.context": learner.context,
        "adapter_a.w1": adapter_a.w1,
        "adapter_a.b1": adapter_a.b1,
        "adapter_a.w2": adapter_a.w2,
        "adapter_a.b2": adapter_a.b2,
        "adapter_b.w1": adapter_b.w1,
        "adapter_b.b1": adapter_b.b1,
        "adapter_b.w2": adapter_b.w2,
        "adapter_b.b2": adapter_b.b2,
    }


def stage2_batch_loss(batch: Iterable[dict], params: dict, static: dict, loss_cfg: LossConfig):
    """Mean Stage-2 objective over a batch; params may hold tape tensors."""
    from .model import branch_layer_maps

    learner = PromptLearner(
        context=params["learner.context"],
        class_embed_normal=static["class_normal"],
        class_embed_anomaly=static["class_anomaly"],
    )
    adapters = {
        "A": BranchAdapter(
            w1=params["adapter_a.w1"], b1=params["adapter_a.b1"],
            w2=params["adapter_a.w2"], b2=params["adapter_a.b2"],
        ),
        "B": BranchAdapter(
            w1=params["adapter_b.w1"], b1=params["adapter_b.b1"],
            w2=params["adapter_b.w2"], b2=params["adapter_b.b2"],
        ),
    }
    text = TextEncoderSpec(
        mode="toy", projection=static["text_projection"], mixer=static["text_mixer"]
    )

    total = None
    count = 0
    for item in batch:
        tokens = _TokenPair(item["t_n"], item["t_a"])
        branch_losses = {}
        for name in ("A", "B"):
            stacks = branch_layer_maps(
                item["aligned"], tokens, learner, adapters[name], text, static["tau_s"]
            )
            layer_maps = [
                (ad.reshape(s_a, item["grid"]), ad.reshape(s_n, item["grid"]))
                for _, s_a, s_n in stacks
            ]
            branch_losses[name] = branch_loss(layer_maps, item["y_grid"], loss_cfg)
        loss = stage2_loss(branch_losses["A"], branch_losses["B"], loss_cfg)
        total = loss if total is None else ad.add(total, loss)
        count += 1
    return ad.div(total, float(count))


class _TokenPair:
    def __init__(self, t_n, t_a):
        self.t_n = t_n
        self.t_a = t_a


def train_stage2(
    bundles: Sequence[FeatureBundle],
    proj: VisualProjection,
    bank: MemoryBank,
    cfg: TrainConfig,
    dtype=np.float32,
) -> tuple[EntroADModel, list[HistoryRow]]:
    _require_supervision(bundles)
    d = bundles[0].d
    learner, adapter_a, adapter_b, text, align = init_model_state(cfg, d)

    checksum_before = frozen_checksum(proj, bank)
    ctx = _stage2_context(bundles, proj, bank, cfg, align, dtype)
    static = {
        "class_normal": learner.class_embed_normal.astype(dtype),
        "class_anomaly": learner.class_embed_anomaly.astype(dtype),
        "text_projection": text.projection.astype(dtype),
        "text_mixer": text.mixer.astype(dtype),
        "tau_s": cfg.tau_s,
    }
    loss_cfg = _loss_config(cfg)
    params = _stage2_params(learner, adapter_a, adapter_b)
    params = {k: v.astype(dtype) for k, v in params.items()}
    optimizer = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    history: list[HistoryRow] = []

    for epoch in range(cfg.epochs_stage2):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        for batch_idx, indices in enumerate(_batches(len(ctx), cfg.batch_size, rng)):
            tensors = {name: ad.Tensor(arr, requires_grad=True) for name, arr in params.items()}
            loss = stage2_batch_loss([ctx[i] for i in indices], tensors, static, loss_cfg)
            loss_value = float(ad.value_of(loss))
            if not np.isfinite(loss_value):
                raise NumericalError(f"non-finite stage-2 loss at epoch {epoch} batch {batch_idx}")
            loss.backward()
            grads = {name: t.grad for name, t in tensors.items()}
            optimizer.step(params, grads)
            history.append(HistoryRow(2, epoch, batch_idx, loss_value))

    learner = PromptLearner(
        context=params["learner.context"],
        class_embed_normal=learner.class_embed_normal,
        class_embed_anomaly=learner.class_embed_anomaly,
    )
    adapter_a = BranchAdapter(
        w1=params["adapter_a.w1"], b1=params["adapter_a.b1"],
        w2=params["adapter_a.w2"], b2=params["adapter_a.b2"],
    )
    adapter_b = BranchAdapter(
        w1=params["adapter_b.w1"], b1=params["adapter_b.b1"],
        w2=params["adapter_b.w2"], b2=params["adapter_b.b2"],
    )

    if frozen_checksum(proj, bank) != checksum_before:
        raise NumericalError("stage-2 training mutated frozen stage-1 state")

    model = EntroADModel(
        projections=proj,
        bank=bank,
        learner=learner,
        adapter_a=adapter_a,
        adapter_b=adapter_b,
        text=text,
        align=align,
        config=replace(cfg),
        d=d,
    )
    return model, history


def train(bundles: Sequence[FeatureBundle], cfg: TrainConfig, dtype=np.float32):
    """Run both stages; returns the trained model and the full loss history."""
    proj, bank, history1 = train_stage1(bundles, cfg, dtype=dtype)
    model, history2 = train_stage2(bundles, proj, bank, cfg, dtype=dtype)
    return model, history1 + history2


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckRow:
    param: str
    coord: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    rows: list[GradCheckRow]

    def worst(self, k: int = 10) -> list[GradCheckRow]:
        return sorted(self.rows, key=lambda r: -r.rel_err)[:k]


def check_gradients(
    build_loss: Callable[[dict], object],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords: Optional[int] = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of a scalar graph against central differences.

    `build_loss` receives a dict mapping parameter names to tape tensors
    (for the analytic pass) or float64 arrays (for each FD evaluation).
    """
    params64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params64.items()}
    loss = build_loss(tensors)
    if not np.isfinite(float(ad.value_of(loss))):
        raise NumericalError("non-finite loss in gradient check")
    loss.backward()
    analytic = {k: t.grad if t.grad is not None else np.zeros_like(t.value) for k, t in tensors.items()}

    all_coords = [(name, idx) for name, arr in params64.items() for idx in np.ndindex(arr.shape)]
    if max_coords is not None and len(all_coords) > max_coords:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(all_coords), size=max_coords, replace=False)
        all_coords = [all_coords[i] for i in sorted(chosen)]

    coords_by_param: dict[str, list[tuple]] = {}
    for name, idx in all_coords:
        coords_by_param.setdefault(name, []).append(idx)

    fd = ad.finite_difference(
        lambda arrays: float(ad.value_of(build_loss(arrays))),
        params64,
        h=h,
        coords={k: coords_by_param.get(k, []) for k in params64},
    )

    rows = []
    for name, idx_grads in fd.items():
        for idx, numeric in idx_grads.items():
            analytic_val = float(analytic[name][idx])
            rows.append(
                GradCheckRow(
                    param=name,
                    coord=idx,
                    analytic=analytic_val,
                    numeric=numeric,
                    rel_err=ad.relative_error(analytic_val, numeric),
                )
            )
    max_err = max((r.rel_err for r in rows), default=0.0)
    return GradCheckReport(max_rel_err=max_err, rows=rows)


def grad_check(
    model: EntroADModel,
    bundles: Sequence[FeatureBundle],
    h: float = 1e-5,
    max_coords: Optional[int] = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Verify the full Stage-2 gradient path on a batch, in float64."""
    cfg = model.config
    ctx = _stage2_context(bundles, model.projections, model.bank, cfg, model.align, np.float64)
    static = {
        "class_normal": model.learner.class_embed_normal.astype(np.float64),
        "class_anomaly": model.learner.class_embed_anomaly.astype(np.float64),
        "text_projection": model.text.projection.astype(np.float64),
        "text_mixer": model.text.mixer.astype(np.float64),
        "tau_s": cfg.tau_s,
    }
    loss_cfg = _loss_config(cfg)
    params = _stage2_params(model.learner, model.adapter_a, model.adapter_b)

    def build_loss(p):
        return stage2_batch_loss(ctx, p, static, loss_cfg)

    return check_gradients(build_loss, params, h=h, max_coords=max_coords, seed=seed)


# -- history ------------------------------------------------------------------


def write_history_csv(history: Sequence[HistoryRow], path, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "batch", "loss"])
        for row in history:
            writer.writerow([row.stage, row.epoch, row.batch, f"{row.loss:.8g}"])
