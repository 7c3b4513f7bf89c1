"""Run configuration: every pipeline hyperparameter with its default.

A TOML config file may override any key; CLI flags override the file;
the ENTROAD_SEED environment variable overrides the seed last. Unknown
keys are rejected so typos fail loudly. The canonical hash of a resolved
config is embedded in every artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as _toml


DEFAULT_LAYERS = [6, 12, 18, 24]


@dataclass
class TrainConfig:
    """All knobs of the pipeline. Defaults follow the reference settings:
    lr 4e-4, batch 8, 1 + 5 epochs, router temperature 0.1, logit
    temperature 0.07, gate (0.5, 5, 50), branch weights 0.7/0.3, Gaussian
    sigma 4, top-1% pooling, score balance 0.7, fusion 0.7/0.3."""

    # optimization
    lr: float = 4e-4
    batch_size: int = 8
    epochs_stage1: int = 1
    epochs_stage2: int = 5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    # layer sets
    layers: list[int] = field(default_factory=lambda: list(DEFAULT_LAYERS))
    map_layers: list[int] | None = None  # None -> same as layers
    agg_layer: int | None = None         # None -> deepest layer

    # dimensions
    d_r: int = 768
    d_t: int = 768
    n_context: int = 12
    adapter_hidden: int | None = None    # None -> d_t // 2

    # memory
    m_patches: int = 512
    m_images: int = 64
    quantile: float = 0.9

    # routing / gating
    temperature: float = 0.1
    tau: float = 0.5
    k0: float = 5.0
    k1: float = 50.0
    gate_enabled: bool = True

    # alignment
    tau_s: float = 0.07

    # losses
    alpha_f: float = 0.25
    gamma: float = 2.0
    lambda_d: float = 1.0
    lambda_a: float = 0.7
    lambda_b: float = 0.3

    # inference post-processing
    sigma: float = 4.0
    top_fraction: float = 0.01
    score_balance: float = 0.7           # weight of the retrieval score
    alpha_structured: float = 0.7
    beta_structured: float = 0.3
    alpha_diffuse: float = 0.3
    beta_diffuse: float = 0.7

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.temperature <= 0 or self.tau_s <= 0:
            raise ConfigError("temperatures must be positive")
        if not self.layers:
            raise ConfigError("layer set must be non-empty")
        if not 0.0 <= self.quantile < 1.0:
            raise ConfigError("quantile must lie in [0, 1)")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if not 0.0 <= self.score_balance <= 1.0:
            raise ConfigError("score_balance must lie in [0, 1]")

    @property
    def resolved_map_layers(self) -> list[int]:
        return list(self.map_layers) if self.map_layers is not None else list(self.layers)

    @property
    def resolved_agg_layer(self) -> int:
        return self.agg_layer if self.agg_layer is not None else self.layers[-1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


_FIELD_NAMES = {f.name for f in dataclasses.fields(TrainConfig)}


def config_from_dict(data: dict) -> TrainConfig:
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = TrainConfig(**data)
    cfg.validate()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Resolve a config: defaults <- TOML file <- overrides <- ENTROAD_SEED."""
    data: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            loaded = _toml.load(fh)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a table")
        data.update(loaded)
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get("ENTROAD_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"ENTROAD_SEED must be an integer, got {env_seed!r}") from exc
    return config_from_dict(data)
