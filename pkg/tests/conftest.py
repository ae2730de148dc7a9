import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kvc.model import ModelConfig, random_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        head_dim=8,
        hidden_dim=32,
        ffn_dim=64,
        vocab_size=64,
        rope_theta=10000.0,
        norm_eps=1e-5,
        max_position=4096,
        qk_norm=False,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return random_model(tiny_config(), seed=0)


@pytest.fixture
def qk_model():
    return random_model(tiny_config(qk_norm=True), seed=1)


@pytest.fixture
def mha_model():
    return random_model(tiny_config(n_kv_heads=4), seed=2)
