import numpy as np
import pytest

from models import ModelConfig, TrainConfig


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Four-layer ladder on 64-sample windows with attention at layer 3."""
    return ModelConfig(
        filter_schedule=[4, 8, 8, 16],
        filter_width=5,
        stride=2,
        input_len=64,
        attention_layers=[3],
        k=2,
        p=2,
    )


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=1, max_steps=6, lambda_l1=100.0, seed=0,
                       checkpoint_every=2, keep_checkpoints=5, log_every=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
