import numpy as np
import pytest

from dosepred.phantom import PerturbSpec, PhantomConfig, generate_case


@pytest.fixture(scope="session")
def small_cfg():
    return PhantomConfig(seed=3, dims=(32, 32, 32))


@pytest.fixture(scope="session")
def small_case(small_cfg):
    return generate_case(small_cfg, 0, PerturbSpec(seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
