"""Entropy-guided token routing and dual-branch prompt adaptation for
zero-shot anomaly detection, with a synthetic desk-scale backbone."""

from .bundle import FeatureBundle, read_bundle, write_bundle
from .config import TrainConfig, load_config
from .entropy import (
    EntropyMap,
    compute_entropy_map,
    layer_entropy,
    minmax_normalize,
    normalize_attention,
    structural_entropy,
)
from .estimator import EntroADDetector
from .inference import AnomalyResult, fuse_maps, gaussian_smooth, image_score, infer, topk_score
from .memory import (
    MemoryBank,
    MemoryConfig,
    VisualProjection,
    base_anomaly_map,
    build_memory,
    image_retrieval_score,
    patch_evidence,
    project_patches,
    read_bank,
    write_bank,
)
from .metrics import EvalReport, aupro, auroc, average_precision, evaluate
from .model import EntroADModel, branch_anomaly_map, load_model, save_model
from .prompt import (
    BranchAdapter,
    PromptLearner,
    TextEncoderSpec,
    branch_bias,
    encode_prompt,
    read_text_table,
    similarity_maps,
    synthesize_prompts,
    write_text_table,
)
from .routing import (
    RoutedTokens,
    RoutingConfig,
    aggregate_tokens,
    confidence_gate,
    route,
    routing_weights,
)
from .synthetic import SyntheticConfig, gen_synthetic
from .training import grad_check, train, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "AnomalyResult",
    "BranchAdapter",
    "EntroADDetector",
    "EntroADModel",
    "EntropyMap",
    "EvalReport",
    "FeatureBundle",
    "MemoryBank",
    "MemoryConfig",
    "PromptLearner",
    "RoutedTokens",
    "RoutingConfig",
    "SyntheticConfig",
    "TextEncoderSpec",
    "TrainConfig",
    "VisualProjection",
    "aggregate_tokens",
    "aupro",
    "auroc",
    "average_precision",
    "base_anomaly_map",
    "branch_anomaly_map",
    "branch_bias",
    "build_memory",
    "compute_entropy_map",
    "confidence_gate",
    "encode_prompt",
    "evaluate",
    "fuse_maps",
    "gaussian_smooth",
    "gen_synthetic",
    "grad_check",
    "image_retrieval_score",
    "image_score",
    "infer",
    "layer_entropy",
    "load_config",
    "load_model",
    "minmax_normalize",
    "normalize_attention",
    "patch_evidence",
    "project_patches",
    "read_bank",
    "read_bundle",
    "read_text_table",
    "route",
    "routing_weights",
    "save_model",
    "similarity_maps",
    "structural_entropy",
    "synthesize_prompts",
    "topk_score",
    "train",
    "train_stage1",
    "train_stage2",
    "write_bank",
    "write_bundle",
    "write_text_table",
]
