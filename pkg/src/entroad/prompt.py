"""Dual-branch prompt adaptation primitives.

Each branch turns the routed token pair into a bias vector via a small
MLP; the bias is broadcast onto the learnable context tokens, a class
embedding is appended, and the sequence is encoded to a unit text
embedding. Patch features are compared against the normal/anomaly
embeddings with a temperature-scaled two-way softmax to produce per-layer
probability maps.

The text encoder is either a seeded differentiable toy map (training and
synthetic inference) or a table of precomputed embeddings (inference with
real exported features only).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, FormatError

TABLE_MAGIC = b"EATX"
TABLE_VERSION = 1


@dataclass
class PromptLearner:
    context: np.ndarray             # (L, d_t), trainable
    class_embed_normal: np.ndarray  # (d_t,), fixed
    class_embed_anomaly: np.ndarray  # (d_t,), fixed

    @staticmethod
    def init(
        n_context: int, d_t: int, context_seed: int, class_seed: int, dtype=np.float32
    ) -> "PromptLearner":
        # context is trainable and varies per run; the class-name embeddings
        # play the role of fixed vocabulary and share one seed across runs
        ctx = 0.02 * np.random.default_rng(context_seed).normal(size=(n_context, d_t))
        class_rng = np.random.default_rng(class_seed)
        normal = class_rng.normal(size=d_t)
        anomaly = class_rng.normal(size=d_t)
        return PromptLearner(
            context=ctx.astype(dtype),
            class_embed_normal=(normal / np.linalg.norm(normal)).astype(dtype),
            class_embed_anomaly=(anomaly / np.linalg.norm(anomaly)).astype(dtype),
        )


@dataclass
class BranchAdapter:
    """Two-layer MLP from the concatenated token pair to a prompt bias."""

    w1: np.ndarray  # (2d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, d_t)
    b2: np.ndarray  # (d_t,)

    @staticmethod
    def init(d: int, d_t: int, seed: int, hidden: Optional[int] = None, dtype=np.float32) -> "BranchAdapter":
        # zero-initialized output layer: training starts at the unbiased prompt
        hidden = hidden if hidden is not None else max(d_t // 2, 1)
        rng = np.random.default_rng(seed)
        return BranchAdapter(
            w1=(rng.normal(size=(2 * d, hidden)) / np.sqrt(2 * d)).astype(dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=np.zeros((hidden, d_t), dtype=dtype),
            b2=np.zeros(d_t, dtype=dtype),
        )


@dataclass
class TextEncoderSpec:
    mode: str = "toy"  # "toy" | "precomputed"
    projection: Optional[np.ndarray] = None          # toy: (d_t, d_t) seeded fixed map
    mixer: Optional[np.ndarray] = None               # toy: (d_t, d_t) class-conditioned term
    table: dict[str, np.ndarray] = field(default_factory=dict)  # precomputed embeddings

    @staticmethod
    def toy(d_t: int, seed: int, dtype=np.float32) -> "TextEncoderSpec":
        # the mixer (class-conditioned pathway) is deliberately larger than
        # the pooled pathway so prompt adaptation, not the fixed class
        # geometry, decides the normal/anomaly embedding difference
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=(d_t, d_t)) / np.sqrt(d_t)
        mixer = 5.0 * rng.normal(size=(d_t, d_t)) / np.sqrt(d_t)
        return TextEncoderSpec(
            mode="toy", projection=proj.astype(dtype), mixer=mixer.astype(dtype)
        )


def branch_bias(t_n, t_a, adapter: BranchAdapter):
    """b = W2' relu(W1' [t_n; t_a] + b1) + b2; tape-aware in all arguments."""
    token_dim = ad.value_of(t_n).shape[-1] + ad.value_of(t_a).shape[-1]
    if adapter.w1.shape[0] != token_dim:
        raise DataError(
            f"adapter expects token dim {adapter.w1.shape[0]}, got {token_dim}"
        )
    x = ad.concat([t_n, t_a], axis=-1)
    hidden = ad.relu(ad.add(ad.matmul(x, adapter.w1), adapter.b1))
    return ad.add(ad.matmul(hidden, adapter.w2), adapter.b2)


def synthesize_prompts(learner: PromptLearner, bias):
    """Bias-shifted context plus the class row: two (L+1, d_t) sequences."""
    ctx = ad.add(learner.context, ad.reshape(bias, (1, -1)))
    normal = ad.concat([ctx, ad.reshape(learner.class_embed_normal, (1, -1))], axis=0)
    anomaly = ad.concat([ctx, ad.reshape(learner.class_embed_anomaly, (1, -1))], axis=0)
    return normal, anomaly


def encode_prompt(spec: TextEncoderSpec, prompt):
    """Unit text embedding of a prompt sequence (toy) or a prompt id (table).

    The toy encoder is two seeded fixed matrices applied to the mean token
    and to its interaction with the final (class) token. The interaction
    term keeps the normal/anomaly embedding difference steerable by the
    learnable tokens, which a pooled purely-linear map cannot do.
    """
    if spec.mode == "toy":
        pooled = ad.mean_(prompt, axis=0)
        n_rows = ad.value_of(prompt).shape[0]
        last_selector = np.zeros(n_rows, dtype=ad.value_of(prompt).dtype)
        last_selector[-1] = 1.0
        class_row = ad.matmul(last_selector, prompt)
        mixed = ad.matmul(spec.mixer, ad.mul(pooled, class_row))
        return ad.l2_normalize(ad.add(ad.matmul(spec.projection, pooled), mixed), axis=-1)
    if spec.mode == "precomputed":
        if not isinstance(prompt, str):
            raise ConfigError("precomputed text encoding expects a prompt id string")
        if prompt not in spec.table:
            raise DataError(f"prompt id {prompt!r} missing from the embedding table")
        return spec.table[prompt]
    raise ConfigError(f"unknown text encoder mode {spec.mode!r}")


def similarity_maps(z, u_n, u_a, tau_s: float):
    """Per-patch two-way softmax over cosine similarities: (S_n, S_a).

    Implemented as a sigmoid of the scaled similarity difference, which is
    the exact two-class softmax and stays stable at small temperatures.
    """
    if tau_s <= 0:
        raise ConfigError(f"similarity temperature must be positive, got {tau_s}")
    zn = ad.l2_normalize(z, axis=-1)
    un = ad.l2_normalize(u_n, axis=-1)
    ua = ad.l2_normalize(u_a, axis=-1)
    gap = ad.div(ad.sub(ad.matmul(zn, ua), ad.matmul(zn, un)), tau_s)
    s_a = ad.sigmoid(gap)
    s_n = ad.sub(1.0, s_a)
    return s_n, s_a


# -- precomputed-embedding table ------------------------------------------


def write_text_table(table: dict[str, np.ndarray], path) -> None:
    if not table:
        raise DataError("embedding table must not be empty")
    prompts = list(table)
    d_t = int(np.asarray(table[prompts[0]]).shape[0])
    header = json.dumps(
        {"d_t": d_t, "prompts": prompts}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<H", TABLE_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in prompts:
            vec = np.asarray(table[name], dtype=np.float64)
            norm = np.linalg.norm(vec)
            if abs(norm - 1.0) > 1e-5:
                raise DataError(f"embedding for {name!r} is not unit-norm")
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_text_table(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != TABLE_MAGIC:
            raise FormatError(f"{path}: not an embedding table")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != TABLE_VERSION:
            raise FormatError(f"{path}: unsupported table version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        d_t = int(header["d_t"])
        table = {}
        for name in header["prompts"]:
            buf = fh.read(4 * d_t)
            if len(buf) != 4 * d_t:
                raise FormatError(f"{path}: truncated embedding for {name!r}")
            vec = np.frombuffer(buf, dtype="<f4").astype(np.float64)
            table[name] = vec / np.linalg.norm(vec)
    return table
