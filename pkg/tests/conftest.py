import numpy as np
import pytest

from rpsnet.memory import make_synthetic_stream
from rpsnet.model import NetworkConfig, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # input width differs from the hidden width, so layer 0 has a learnable skip
    return NetworkConfig(layers=2, modules=3, input_dim=5, hidden_dims=[4, 4], num_classes=6)


@pytest.fixture
def tiny_net(tiny_cfg):
    return build_network(tiny_cfg, np.random.default_rng(7))


def small_stream(K=3, U=2, dim=8, per_class=40, seed=0, separation=5.0):
    return make_synthetic_stream(K, U, dim, per_class, separation, np.random.default_rng(seed), test_per_class=20)
