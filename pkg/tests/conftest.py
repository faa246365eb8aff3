"""
Shared fixtures: the ellipse landmark benchmark and small noise bases.
"""

import json

import numpy as np
import pytest

from stochmatch.datasets import ellipse_pair
from stochmatch.io import save_landmarks
from stochmatch.kernels import GaussianKernel, make_grid_basis
from stochmatch.models import OptimizerConfig
from stochmatch.optimizer import MatchProblem

# Ellipse benchmark parameters
KERNEL_SCALE = 0.5
LAMBDA = 0.5
N_T = 20


@pytest.fixture
def kernel():
    return GaussianKernel(KERNEL_SCALE)


@pytest.fixture
def ellipses():
    return ellipse_pair(10)


@pytest.fixture
def noise_basis():
    """4x4 Gaussian grid over the ellipse extent."""
    return make_grid_basis([-1.25, -1.15, 1.25, 1.15], 4, 0.5, 0.05)


@pytest.fixture
def problem(ellipses, kernel):
    """Deterministic ellipse matching problem."""
    source, target = ellipses
    return MatchProblem(source, target, LAMBDA, kernel, n_t=N_T)


@pytest.fixture
def noisy_problem(ellipses, kernel, noise_basis):
    source, target = ellipses
    return MatchProblem(source, target, LAMBDA, kernel, noise_basis, N_T)


@pytest.fixture
def optimizer_config():
    return OptimizerConfig(epsilon=0.1, n_s=1000, tol=1e-4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def config_dir(tmp_path, ellipses):
    """Directory holding the ellipse source and target CSVs."""
    source, target = ellipses
    save_landmarks(tmp_path / "source.csv", source)
    save_landmarks(tmp_path / "target.csv", target)
    return tmp_path


@pytest.fixture
def write_config(config_dir):
    """Write a JSON configuration next to the landmark files."""

    def write(document, name="config.json"):
        path = config_dir / name
        path.write_text(json.dumps(document, indent=2), encoding="utf-8")
        return path

    return write
