import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mango.flows.model import ModelConfig, build_model

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None)
settings.load_profile("default")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long directional training experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """One-block model on 8 tokens of width 4, pushed away from its identity-like init."""
    model = build_model(ModelConfig(d_model=4, n_tokens_per_modality=4, blocks=1, seed=3))
    noise = np.random.default_rng(3)
    for p in model.parameters():
        p.assign(p.data + noise.normal(0.0, 0.2, p.shape))
    return model
