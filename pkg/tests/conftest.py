import numpy as np
import pytest

import entroad as ea


@pytest.fixture(scope="session")
def tiny_bundles():
    """A dozen small labeled bundles for fast module tests."""
    cfg = ea.SyntheticConfig(n_images=12, grid=(4, 4), d=8, blob_radius=1, seed=11)
    return ea.gen_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_config():
    return ea.TrainConfig(
        d_r=12,
        d_t=16,
        n_context=3,
        m_patches=24,
        m_images=8,
        batch_size=4,
        seed=5,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_bundles, tiny_config):
    model, history = ea.train(tiny_bundles, tiny_config)
    return model


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
