import numpy as np
import pytest

from wavemix.grid import GridSpec, State, Weights
from wavemix.noise import NoiseModel, power_law_coeffs
from wavemix.dynamics import Integrator, PhysParams, default_alpha


@pytest.fixture(scope="session")
def small_grid():
    """Cheap grid for unit tests; acceptance uses the full default grid."""
    return GridSpec(half_width=20.0, n=127)


@pytest.fixture(scope="session")
def small_weights(small_grid):
    return Weights(small_grid)


@pytest.fixture(scope="session")
def small_model(small_grid):
    return NoiseModel(small_grid, power_law_coeffs(0.5, 3.5, 48), n_forced=16, seed=99)


@pytest.fixture(scope="session")
def small_params(small_grid):
    gamma = 0.5
    h = np.zeros(small_grid.n)
    return PhysParams(gamma=gamma, m=0.5, alpha=default_alpha(gamma), h=h)


@pytest.fixture(scope="session")
def small_integ(small_grid, small_params):
    return Integrator(small_grid, small_params.gamma, 2e-3)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)


def random_field(grid, rng, decay=2.0):
    amps = rng.standard_normal(grid.n) * np.arange(1, grid.n + 1, dtype=float) ** (-decay)
    from wavemix.grid import to_phys

    return to_phys(amps, grid)


@pytest.fixture()
def smooth_field(small_grid, rng):
    return random_field(small_grid, rng)
