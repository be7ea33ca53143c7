"""Pytest fixtures for repulse tests."""

import numpy as np
import pytest

from repulse.models import Activation, MlpSpec, ParticleMode
from repulse.particles import init_particles
from repulse.tasks import gen_regression_toy, gen_two_moons


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run end-to-end experiment tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Deterministic random stream."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """A 3-input, two-hidden-layer tanh network with 4 outputs."""
    return MlpSpec((3, 5, 4, 4), Activation.TANH)


@pytest.fixture
def full_ensemble(small_spec):
    """Five random full-network particles."""
    return init_particles(ParticleMode.FULL_ENSEMBLE, small_spec, 5, seed=7)


@pytest.fixture
def multi_head():
    """Four linear heads on a random tanh base with 6 features."""
    base = MlpSpec((3, 8, 6), Activation.TANH)
    head = MlpSpec((6, 4), Activation.TANH)
    return init_particles(ParticleMode.MULTI_HEAD, base, 4, seed=11, head_spec=head)


@pytest.fixture
def toy_regression():
    """Small 1-D regression dataset."""
    return gen_regression_toy(seed=0, n_per_cluster=10)


@pytest.fixture
def moons():
    """Small two-moons classification dataset."""
    return gen_two_moons(seed=0, n=60, noise_std=0.1)


@pytest.fixture
def write_config(tmp_path):
    """Write a TOML config into the test directory and return its path."""

    def _write(text: str, name: str = "config.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return _write
