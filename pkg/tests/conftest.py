"""Shared fixtures for the mherlab test suite."""

import numpy as np
import pytest

from mherlab.config import RunConfig
from mherlab.envs import Point2DFourRoom, Point2DLarge, PlanarReacher


def pytest_addoption(parser):
    parser.addoption(
        '--runslow', action='store_true', default=False,
        help='Run experiment-scale tests marked slow'
    )


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: experiment-scale test, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def point_env():
    return Point2DLarge()


@pytest.fixture
def fourroom_env():
    return Point2DFourRoom()


@pytest.fixture
def reacher_env():
    return PlanarReacher()


@pytest.fixture
def small_run_settings(tmp_path):
    """A run small enough to finish in a few seconds."""
    return {
        'env': 'point2d-large',
        'algo': 'mher',
        'seed': 3,
        'epochs': 2,
        'batches_per_episode': 2,
        'batch_size': 16,
        'warmup_updates': 5,
        'warmup_batch_size': 64,
        'warmup_episodes': 2,
        'eval_episodes': 8,
        'ed_episodes': 4,
        'horizon': 20,
        'buffer_size': 10_000,
        'hidden_units': 16,
        'actor_layers': 2,
        'model_layers': 2,
        'output_dir': str(tmp_path / 'runs'),
    }


@pytest.fixture
def small_run_config(small_run_settings):
    return RunConfig(small_run_settings)
