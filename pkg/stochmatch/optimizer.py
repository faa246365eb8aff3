"""
String Optimizer Module

Stochastic Beg iterations on landmark strings. At zero temperature one noise
realization is drawn per ensemble member and kept for the whole run; at finite
temperature every iteration draws a fresh realization. Deterministic Beg is the
zero-temperature run with the empty noise basis.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError
from .kernels import BrownianPath, Kernel, NoiseBasis, brownian_sample, derive_seed
from .landmarks import (
    LandmarkConfig,
    StringState,
    evaluate_string,
    momentum_residual,
    string_gradient,
    zero_momentum,
)
from .models import OptimizerConfig
from .settings import get_settings

logger = logging.getLogger(__name__)

__all__ = [
    "MatchProblem",
    "OptimizerConfig",
    "StringRun",
    "StringTrace",
    "deterministic_beg",
    "endpoint_statistics",
    "ensemble_average",
    "run_finite_temperature",
    "run_matching",
    "run_zero_temperature",
    "string_step",
]


@dataclass(frozen=True, eq=False)
class MatchProblem:
    """
    Inexact landmark matching problem.

    Attributes:
        source: Source configuration I_0
        target: Target configuration I_1
        lam: Inexactness weight lambda
        kernel: Green's kernel K
        basis: Noise fields
        n_t: Points of the t-grid
    """

    source: LandmarkConfig
    target: LandmarkConfig
    lam: float
    kernel: Kernel
    basis: NoiseBasis = field(default_factory=NoiseBasis.empty)
    n_t: int = 20

    def __post_init__(self):
        if self.source.n != self.target.n:
            raise ConfigurationError(
                f"source has {self.source.n} landmarks but target has {self.target.n}"
            )
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if self.n_t < 2:
            raise ConfigurationError(f"n_t must be at least 2, got {self.n_t}")

    def evaluate(self, p: np.ndarray, path: Optional[BrownianPath]) -> StringState:
        """Flow, Jacobians and energy of p under one noise realization."""
        return evaluate_string(self.source, p, self.basis, path, self.kernel, self.target, self.lam)

    def draw_path(self, seed: int, refinement: int = 1) -> BrownianPath:
        """Brownian increments for one realization, refinement steps per interval."""
        n_steps = refinement * (self.n_t - 1)
        return brownian_sample(seed, n_steps, self.basis.n_fields, 1.0 / n_steps)

    def with_source(self, source: LandmarkConfig) -> "MatchProblem":
        return replace(self, source=source)

    def with_target(self, target: LandmarkConfig) -> "MatchProblem":
        return replace(self, target=target)

    def deterministic(self) -> "MatchProblem":
        return replace(self, basis=NoiseBasis.empty())


@dataclass
class StringTrace:
    """Iterates of one ensemble member."""

    member: int
    energies: List[float]
    residuals: List[float]
    final: StringState
    history_q: List[np.ndarray]
    history_p: List[np.ndarray]
    converged: bool
    iterations: int


@dataclass
class StringRun:
    """All ensemble members of one optimizer run."""

    traces: List[StringTrace]
    temperature: str

    @property
    def final(self) -> StringState:
        return self.traces[0].final

    @property
    def energies(self) -> List[float]:
        return self.traces[0].energies

    @property
    def residuals(self) -> List[float]:
        return self.traces[0].residuals

    @property
    def converged(self) -> bool:
        return all(trace.converged for trace in self.traces)

    @property
    def history(self) -> np.ndarray:
        """
        Stored trajectories, shape (S, n_t, N, 2).

        Finite temperature: the last B iterates of every member. Zero
        temperature: the final string of every member.
        """
        if self.temperature == "finite":
            return np.array([q for trace in self.traces for q in trace.history_q])
        return np.array([trace.final.q for trace in self.traces])

    @property
    def endpoint_samples(self) -> List[LandmarkConfig]:
        return [LandmarkConfig(q[-1]) for q in self.history]

    @property
    def mean_string(self) -> np.ndarray:
        """Average of the stored trajectories."""
        return ensemble_average(self.history)

    def records(self) -> List[Dict[str, float]]:
        """Per-iteration diagnostics of every member."""
        rows = []
        for trace in self.traces:
            for k, (energy, residual) in enumerate(zip(trace.energies, trace.residuals)):
                rows.append(
                    {"iteration": k, "member": trace.member, "energy": energy, "residual": residual}
                )
        return rows


def string_step(
    state: StringState, problem: MatchProblem, path: BrownianPath, epsilon: float
) -> StringState:
    """
    One string update p <- p - epsilon * g, re-evaluated under path.

    Raises:
        DegenerateJacobianError: If a transported Jacobian is singular
        IntegrationError: If the flow becomes non-finite
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    if state.path is not path:
        state = problem.evaluate(state.p, path)
    gradient = string_gradient(state, problem.target, problem.lam)
    return problem.evaluate(state.p - epsilon * gradient, path)


def _initial_momentum(problem: MatchProblem, initial_p: Optional[np.ndarray]) -> np.ndarray:
    if initial_p is None:
        return zero_momentum(problem.n_t, problem.source.n)
    initial_p = np.asarray(initial_p, dtype=float)
    expected = (problem.n_t, problem.source.n, 2)
    if initial_p.shape != expected:
        raise ConfigurationError(
            f"initial momentum has shape {initial_p.shape}, expected {expected}"
        )
    return initial_p


def _zero_temperature_member(
    problem: MatchProblem, cfg: OptimizerConfig, member: int, initial_p: Optional[np.ndarray]
) -> StringTrace:
    path = problem.draw_path(derive_seed(cfg.seed, member), cfg.brownian_refinement)
    state = problem.evaluate(_initial_momentum(problem, initial_p), path)
    energies: List[float] = []
    residuals: List[float] = []
    history_q: deque = deque(maxlen=cfg.window)
    history_p: deque = deque(maxlen=cfg.window)
    best, best_residual = state, np.inf
    converged = False
    iterations = 0

    for k in range(cfg.n_s):
        residual = momentum_residual(state, problem.target, problem.lam)
        energies.append(state.energy)
        residuals.append(residual)
        history_q.append(state.q)
        history_p.append(state.p)
        logger.debug(
            "member %d iteration %d: E=%.6g residual=%.3g", member, k, state.energy, residual
        )
        if residual < best_residual:
            best, best_residual = state, residual
        if residual < cfg.tol or residual == 0.0:
            converged = True
            break
        state = string_step(state, problem, path, cfg.epsilon)
        iterations += 1

    if not converged:
        residual = momentum_residual(state, problem.target, problem.lam)
        if residual < best_residual:
            best, best_residual = state, residual
        converged = residual < cfg.tol or residual == 0.0
        if not converged:
            logger.warning(
                "member %d did not converge in %d iterations (residual %.3g > tol %.3g)",
                member,
                cfg.n_s,
                best_residual,
                cfg.tol,
            )

    return StringTrace(
        member, energies, residuals, best, list(history_q), list(history_p), converged, iterations
    )


def _finite_temperature_member(
    problem: MatchProblem, cfg: OptimizerConfig, member: int, initial_p: Optional[np.ndarray]
) -> StringTrace:
    p = _initial_momentum(problem, initial_p)
    energies: List[float] = []
    residuals: List[float] = []
    history_q: deque = deque(maxlen=cfg.window)
    history_p: deque = deque(maxlen=cfg.window)
    path: Optional[BrownianPath] = None

    for k in range(cfg.n_s):
        path = problem.draw_path(derive_seed(cfg.seed, member, k), cfg.brownian_refinement)
        state = problem.evaluate(p, path)
        gradient = string_gradient(state, problem.target, problem.lam)
        residual = float(np.max(np.linalg.norm(gradient, axis=-1)))
        energies.append(state.energy)
        residuals.append(residual)
        history_q.append(state.q)
        history_p.append(state.p)
        logger.debug(
            "member %d iteration %d: E=%.6g residual=%.3g", member, k, state.energy, residual
        )
        p = state.p - cfg.epsilon * gradient

    final = problem.evaluate(p, path)
    return StringTrace(
        member, energies, residuals, final, list(history_q), list(history_p), False, cfg.n_s
    )


def _run_members(
    member_fn: Callable[[int], StringTrace], n_members: int, workers: Optional[int]
) -> List[StringTrace]:
    workers = workers or get_settings().workers
    if workers <= 1 or n_members == 1:
        return [member_fn(j) for j in range(n_members)]
    with ThreadPoolExecutor(max_workers=min(workers, n_members)) as executor:
        return list(executor.map(member_fn, range(n_members)))


def run_zero_temperature(
    problem: MatchProblem,
    cfg: OptimizerConfig,
    initial_p: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> StringRun:
    """
    Iterate the string under fixed noise until the residual drops below tol.

    Each ensemble member j draws one Brownian path from the sub-seed (seed, j)
    and starts from p == 0 unless initial_p is given. Non-convergence is
    reported through the `converged` flag, with the lowest-residual state kept.

    Args:
        problem: Matching problem
        cfg: Optimizer parameters
        initial_p: Optional starting momentum string (warm start)
        workers: Worker threads for the ensemble (defaults to settings)

    Returns:
        StringRun with one trace per member
    """
    logger.info(
        "Zero-temperature run: N=%d, J=%d, n_t=%d, M=%d",
        problem.source.n,
        problem.basis.n_fields,
        problem.n_t,
        cfg.ensemble_size,
    )
    traces = _run_members(
        lambda j: _zero_temperature_member(problem, cfg, j, initial_p), cfg.ensemble_size, workers
    )
    run = StringRun(traces, "zero")
    logger.info(
        "Zero-temperature run finished: converged=%s, final energy %.6g",
        run.converged,
        run.final.energy,
    )
    return run


def run_finite_temperature(
    problem: MatchProblem,
    cfg: OptimizerConfig,
    initial_p: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> StringRun:
    """
    Iterate the string for exactly n_s steps with fresh noise every step.

    Iteration k of member j uses the sub-seed (seed, j, k). The trajectories
    of the last B iterations are kept for endpoint statistics and the mean string.
    """
    logger.info(
        "Finite-temperature run: N=%d, J=%d, n_t=%d, M=%d, n_s=%d, B=%d",
        problem.source.n,
        problem.basis.n_fields,
        problem.n_t,
        cfg.ensemble_size,
        cfg.n_s,
        cfg.window,
    )
    traces = _run_members(
        lambda j: _finite_temperature_member(problem, cfg, j, initial_p), cfg.ensemble_size, workers
    )
    return StringRun(traces, "finite")


def run_matching(
    problem: MatchProblem,
    cfg: OptimizerConfig,
    initial_p: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> StringRun:
    """Dispatch on cfg.temperature."""
    if cfg.temperature == "finite":
        return run_finite_temperature(problem, cfg, initial_p, workers)
    return run_zero_temperature(problem, cfg, initial_p, workers)


def deterministic_beg(
    problem: MatchProblem, cfg: OptimizerConfig, workers: Optional[int] = None
) -> StringRun:
    """Zero-temperature iteration with the empty noise basis."""
    zero = cfg.model_copy(update={"temperature": "zero"})
    return run_zero_temperature(problem.deterministic(), zero, workers=workers)


def ensemble_average(strings: Union[Sequence[np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Pointwise mean over the ensemble index.

    Raises:
        ConfigurationError: If the ensemble is empty
    """
    if len(strings) == 0:
        raise ConfigurationError("cannot average an empty ensemble")
    return np.mean(np.stack([np.asarray(s, dtype=float) for s in strings]), axis=0)


def sample_moments(samples: np.ndarray):
    """
    Sample mean and unbiased covariance over the first axis.

    Args:
        samples: Array (S, ..., 2)

    Returns:
        Tuple (mean (..., 2), covariance (..., 2, 2))

    Raises:
        ConfigurationError: If fewer than two samples are given
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ConfigurationError(
            f"need at least 2 samples for a covariance, got {samples.shape[0]}"
        )
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = np.einsum("s...a,s...b->...ab", centered, centered) / (samples.shape[0] - 1)
    return mean, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def endpoint_statistics(run: Union[StringRun, np.ndarray]):
    """
    Per-(t, i) sample mean and unbiased covariance of the stored trajectories.

    Returns:
        Tuple (mean (n_t, N, 2), covariance (n_t, N, 2, 2))
    """
    history = run.history if isinstance(run, StringRun) else np.asarray(run, dtype=float)
    return sample_moments(history)
