"""
Stochastic Shape Matching

String methods for stochastically perturbed LDDMM landmark and image
matching, with endpoint sampling, mean estimation and parameter inference.
"""

__version__ = "1.0.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    DataFormatError,
    DegenerateJacobianError,
    IntegrationError,
    StochMatchError,
    WeightUnderflowError,
)
from .kernels import GaussianKernel, NoiseBasis, make_grid_basis  # noqa: E402
from .landmarks import LandmarkConfig  # noqa: E402
from .models import OptimizerConfig, RunConfig  # noqa: E402
from .optimizer import MatchProblem, deterministic_beg, run_matching  # noqa: E402

__all__ = [
    "ConfigurationError",
    "DataFormatError",
    "DegenerateJacobianError",
    "GaussianKernel",
    "IntegrationError",
    "LandmarkConfig",
    "MatchProblem",
    "NoiseBasis",
    "OptimizerConfig",
    "RunConfig",
    "StochMatchError",
    "WeightUnderflowError",
    "__version__",
    "deterministic_beg",
    "make_grid_basis",
    "run_matching",
]
