import numpy as np
import pytest

from bnc import tensor as tc
from bnc.codec import ModelConfig


@pytest.fixture(autouse=True)
def fresh_tape():
    tc.clear_tape()
    yield
    tc.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Desk-scale model: strides (2,2), 8-dim latents, 2 quantizer layers of 16."""
    return ModelConfig(sample_rate=8000, strides=(2, 2), base_channels=8, latent_dim=8,
                       rvq_layers=2, codebook_size=16, film_blocks=1, fourier_features=8,
                       cond_hidden=32, warp_channels=8, dtype="float64")
