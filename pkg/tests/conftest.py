import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from maskkv import ModelConfig, init_model  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def tiny_params():
    return init_model(ModelConfig(num_layers=2, num_heads=2, model_dim=8, vocab_size=16, seed=7))


@pytest.fixture(scope="session")
def small_params():
    return init_model(ModelConfig(num_layers=3, num_heads=4, model_dim=16, vocab_size=24, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
