import numpy as np
import pytest

from qrbsde.pde import SpaceGrid, solve_interval
from qrbsde.presets import american_oracle, heat_oracle
from qrbsde.reflected import solve_continuous_reference


@pytest.fixture(scope="session")
def heat():
    p = heat_oracle()
    grid = SpaceGrid.default(p.model, p.T)
    return p, grid, solve_interval(p.obstacle, 0.0, p.T, p.model, p.driver, grid, 4096)


@pytest.fixture(scope="session")
def american():
    p = american_oracle()
    grid = SpaceGrid.default(p.model, p.T)
    return p, grid, solve_continuous_reference(p.model, p.driver, p.obstacle, grid, p.T, 4096)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
