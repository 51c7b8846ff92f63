import numpy as np
import pytest

from armflow.data.toy import ToyDataConfig, make_splits
from armflow.flow.field import CfgParams, TimestepSamplerConfig
from armflow.nn.models import ModelConfig
from armflow.nn.vae import VaeConfig
from armflow.train.optim import TrainConfig


def relative_error(actual, expected) -> float:
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected))), 1e-8)
    return float(np.max(np.abs(actual - expected))) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_cfg():
    return ModelConfig(
        token_dim=4,
        hidden=16,
        n_layers=2,
        n_heads=2,
        mlp_layers=2,
        n_labels=3,
        max_tokens=16,
        freq_dim=8,
    )


@pytest.fixture
def vae_cfg():
    return VaeConfig(
        channels=4,
        latent=4,
        hidden=8,
        n_down_blocks=2,
        layers_per_block=1,
        downsample_factor=4,
    )


@pytest.fixture
def toy_cfg():
    return ToyDataConfig(length=16, n_labels=3)


@pytest.fixture
def toy_splits(toy_cfg):
    return make_splits(12, 9, toy_cfg, seed=7)


@pytest.fixture
def train_cfg():
    return TrainConfig(
        lr=1e-3,
        batch_size=4,
        max_iterations=4,
        seed=3,
        guidance=CfgParams(omega=1.5, p_drop=0.25),
        timesteps=TimestepSamplerConfig(mu=-0.4, sigma=1.0, p_instant=0.25),
        euler_steps=3,
        checkpoint_every=2,
    )


def randomize(params, seed: int = 0, scale: float = 0.3) -> None:
    """Replace every weight with noise so zero-initialised heads do not hide bugs."""
    rng = np.random.default_rng(seed)
    for name in list(params):
        params.assign(name, scale * rng.standard_normal(params[name].shape))
