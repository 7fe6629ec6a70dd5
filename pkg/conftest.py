"""
SigTraj - Shared test fixtures
"""

import numpy as np
import pytest

from data_model import window_from_arrays
from predictor import HyperParams
from tensor_core import set_default_dtype


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training/ablation checks (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float64_default():
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hp():
    """Small model that still exercises every block"""
    return HyperParams(
        embed_dim=4, hidden_dim=8, input_dim=8, attn_dim=8, obs_len=3, pred_len=2, k_window=2,
        noise_dim=2, K=3, batch=2, epochs=1, seed=5,
    )


def constant_velocity_window(n=2, obs_len=3, pred_len=2, step=(0.0, -10.0), spacing=30.0, lanes=None, start_frame=0):
    """n agents driving in a column at constant velocity"""
    step = np.asarray(step, dtype=np.float64)
    starts = np.array([[200.0 + spacing * i, 400.0] for i in range(n)])
    frames = np.arange(obs_len + pred_len)
    track = starts[:, None, :] + frames[None, :, None] * step[None, None, :]
    return window_from_arrays(track[:, :obs_len], track[:, obs_len:], lane_ids=lanes, start_frame=start_frame)


@pytest.fixture
def cv_window():
    return constant_velocity_window()
