import numpy as np
import pytest

from layout_retouch.backends import ToyBackendSpec, make_toy_pair
from layout_retouch.core import PipelineConfig

PROMPT = "a red <*> on the beach"


@pytest.fixture(scope="session")
def toy_pair():
    return make_toy_pair(ToyBackendSpec(seed=0))


@pytest.fixture(scope="session")
def vanilla(toy_pair):
    return toy_pair[0]


@pytest.fixture(scope="session")
def personalized(toy_pair):
    return toy_pair[1]


@pytest.fixture
def config():
    return PipelineConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
