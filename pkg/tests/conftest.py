import numpy as np
import pytest

from zsal.fixtures import FIXTURE_CONFIG, ci_fixture
from zsal.weights_io import ModelConfig, make_synthetic_model


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture(scope="session")
def tiny_store(tiny_config):
    return make_synthetic_model(tiny_config, 0)


@pytest.fixture(scope="session")
def fixture_config():
    return FIXTURE_CONFIG


@pytest.fixture(scope="session")
def fixture_store():
    return make_synthetic_model(FIXTURE_CONFIG, 0)


@pytest.fixture(scope="session")
def ci():
    return ci_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, m, c, dtype=np.float64):
    x = rng.standard_normal((m, c))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(dtype)
