import math
import numpy as np
import pytest
from mkvfbsde.coefficients import CoefficientSet
from mkvfbsde.field import GridSpec
from mkvfbsde.fixed_point import SolverConfig
from mkvfbsde.problems import counterexample
from mkvfbsde.store import RunDirectory


def brownian_bundle(G=0.0, B=0.0, F=0.0, sigma=1.0, declared_L=1.0):
    """Scalar bundle with constant drift, driver and volatility."""
    terminal = G if callable(G) else (lambda x, mu: G)
    return CoefficientSet(
        (1, 1, 1),
        lambda t, x, y, z, mu: B,
        lambda t, x, y, z, mu: F,
        lambda t, x, y, mu: sigma,
        terminal,
        declared_L=declared_L,
    )


@pytest.fixture
def run_directory(tmp_path):
    """Empty run directory."""
    return RunDirectory(tmp_path / "run")


@pytest.fixture
def small_grid():
    return GridSpec(1.0, 20, 4.0, 41)


@pytest.fixture
def small_config(small_grid):
    return SolverConfig(x0=(0.0,), grid=small_grid, particles=400, max_iters=20)


@pytest.fixture
def counterexample_small():
    """Counter-example at A = 1 on a coarse grid with few particles."""
    coefficients, config, reference = counterexample(1.0, 10.0)
    config = config.replace(
        grid=GridSpec(math.pi / 4, 50, 6.0, 61), particles=2000, max_iters=30
    )
    return coefficients, config, reference


@pytest.fixture
def rng(faker):
    return np.random.default_rng(faker.pyint(max_value=2 ** 31))


@pytest.fixture
def brownian():
    """Factory of scalar bundles with constant coefficients."""
    return brownian_bundle
