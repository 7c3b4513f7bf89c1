"""Desk-scale benchmark recipe shared by the acceptance suite and the CLI.

One function pins the synthetic data settings and the reduced model widths
used for end-to-end verification runs; all reference hyperparameters
(learning rate, temperatures, loss and fusion weights) keep their
defaults.
"""

from __future__ import annotations

from .config import TrainConfig
from .synthetic import SyntheticConfig

HOLDOUT_SEED_OFFSET = 1000


def desk_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        seed=seed,
        d_r=32,
        d_t=32,
        n_context=4,
        m_patches=192,
        m_images=32,
    )


def desk_synth_config(seed: int = 0, n_images: int = 200) -> SyntheticConfig:
    return SyntheticConfig(n_images=n_images, grid=(8, 8), d=16, seed=seed)


def desk_holdout_config(seed: int = 0, n_images: int = 100) -> SyntheticConfig:
    return desk_synth_config(seed=seed + HOLDOUT_SEED_OFFSET, n_images=n_images)
