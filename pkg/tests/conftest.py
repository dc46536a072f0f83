import numpy as np
import pytest

from stgrit.dataset import FeatureStats, generate_synthetic, record_to_sequence
from stgrit.model import STGRIT, ModelConfig, prepare_sequence


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(p=2, q=3, embed_dim=8, num_heads=2, num_groups=1)


@pytest.fixture
def tiny_sequences():
    recs = generate_synthetic(3, num_traces=8, num_layers=6, seed=5, p=2, q=3)
    return [record_to_sequence(r, 2, 3) for r in recs]


@pytest.fixture
def tiny_model(tiny_config):
    return STGRIT(tiny_config, seed=3)


@pytest.fixture
def tiny_prepared(tiny_sequences):
    stats = FeatureStats.from_sequences(tiny_sequences)
    return [prepare_sequence(s, stats) for s in tiny_sequences]
