import numpy as np
import pytest

from app.core.panel import EstimatorPanel
from app.services.dgp import SimConfig, gen_iv_environments
from app.services.functionals import EnvDataset


def make_panel(estimates, variances, influence=None, labels=None):
    labels = labels or [f"f{j + 1}" for j in range(len(estimates))]
    return EstimatorPanel(estimates=estimates, variances=variances, labels=labels, influence=influence)


@pytest.fixture
def panel_factory():
    return make_panel


@pytest.fixture
def small_sim():
    return SimConfig(q=4, n_rct=50, n_obs=1000, seed=11)


@pytest.fixture
def iv_data(small_sim):
    return gen_iv_environments(small_sim)


@pytest.fixture
def two_env_data():
    """Environment means: A-bar = (0.8, 0.3), Y-bar = (2, 1)."""
    spread = np.linspace(-1.0, 1.0, 10)
    z = np.repeat([0, 1], 10)
    a = np.concatenate([[1] * 8 + [0] * 2, [1] * 3 + [0] * 7])
    y = np.concatenate([2.0 + spread, 1.0 + spread[::-1]])
    return EnvDataset(z, a, y, q=2)
