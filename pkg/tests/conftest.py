import os
from pathlib import Path

import numpy as np
import pytest

from microlink.data import BatteryDistribution, SyntheticConfig, build_scenario, generate_synthetic
from microlink.database import Database
from microlink.models import BatteryParams, ScenarioConfig

ROOT = Path(__file__).resolve().parents[1]


def pytest_addoption(parser):
    """Register the switch for long closed-loop runs."""
    parser.addoption("--runslow", action="store_true", default=False, help="Run tests marked slow.")


def pytest_collection_modifyitems(config, items):
    """Skip slow tests unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def test_db():
    """Create a test database fixture."""
    test_db_file = "test_db.duckdb"
    if os.path.exists(test_db_file):
        os.remove(test_db_file)

    db = Database(test_db_file)
    yield db
    db.close()
    if os.path.exists(test_db_file):
        os.remove(test_db_file)


@pytest.fixture
def battery():
    """A lossy household battery."""
    return BatteryParams(alpha=0.99, beta=0.95, gamma=0.95, capacity=1.0, u_max=0.25, u_min=-0.25)


@pytest.fixture
def rng():
    """Seeded generator for random test instances."""
    return np.random.default_rng(1234)


@pytest.fixture
def make_scenario():
    """Factory for small synthetic scenarios; two coupled microgrids by default."""

    def factory(
        sizes=(3, 2), eta=None, horizon=3, sim_length=3, start_step=20, seed=0, days=1, noise=0.1, name="test"
    ):
        if eta is None:
            eta = np.eye(len(sizes)) if len(sizes) != 2 else np.array([[1.0, 0.9], [0.9, 1.0]])
        households = generate_synthetic(SyntheticConfig(households=sum(sizes), days=days, noise=noise, seed=seed))
        settings = ScenarioConfig(T=0.5, N=horizon, sim_length=sim_length, start_step=start_step, rng_seed=seed)
        return build_scenario(households, np.asarray(eta), list(sizes), BatteryDistribution(), settings, name=name)

    return factory


@pytest.fixture
def scenario(make_scenario):
    """Two microgrids of three and two households."""
    return make_scenario()


@pytest.fixture
def committed_config():
    """The committed regression scenario."""
    from microlink.config import Config

    return Config.load(ROOT / "config.yaml")
