"""
Shared pytest configuration: the `slow` marker, the --runslow switch and
small fixtures used across the test modules.
"""
import numpy as np
import pytest

from geometry import PointCloud, make_rng
from model import EquiShapeConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """Small architecture that keeps a forward pass in the millisecond range."""
    return EquiShapeConfig(k=4, layers=2, dim=8, vector_dim=4, lrf_dim=8, edgeconv_channels=(8, 8, 16), seed=3)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def cloud_pair(rng):
    return PointCloud(rng.standard_normal((14, 3))), PointCloud(rng.standard_normal((14, 3)))


@pytest.fixture
def tiny_loss():
    from matcher import LossConfig
    return LossConfig(k_latent=4)
