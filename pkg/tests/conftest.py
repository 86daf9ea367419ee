import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.model import ModelConfig, init_model  # noqa: E402
from modules.synthgen import SceneConfig, generate_scene, pair_rng  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


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


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(descriptor_dim=8, num_layers=1, heads=2, sinkhorn_iterations=20, encoder_hidden=(16, 16))


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_model(small_config, 0)


@pytest.fixture(scope="session")
def small_scene():
    return SceneConfig(num_points=12, descriptor_dim=8, num_distractors=3)


@pytest.fixture
def small_pair(small_scene):
    return generate_scene(pair_rng(7, 0), small_scene)
