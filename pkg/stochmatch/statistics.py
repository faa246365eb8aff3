"""
Statistics Module

Generative sampling from the stochastic Hamiltonian system, mean strings,
template (Frechet-type) estimation, moment-based noise inference and the
importance-weighted EM gradient.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd

from .errors import ConfigurationError, WeightUnderflowError
from .kernels import GaussianKernel, NoiseBasis, brownian_batch, derive_seed
from .landmarks import (
    LandmarkConfig,
    Points,
    StringState,
    as_points,
    hamiltonian_batch,
    string_gradient,
)
from .models import FrechetConfig, InferenceSpec, OptimizerConfig
from .optimizer import MatchProblem, StringRun, ensemble_average, run_matching, sample_moments
from .settings import get_settings

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """n i.i.d. landmark observations with a common N, stored as (n, N, 2)."""

    configs: np.ndarray

    def __post_init__(self):
        raw = self.configs
        if not isinstance(raw, np.ndarray):
            raw = [as_points(c) for c in raw]
        configs = np.array(raw, dtype=float)
        if configs.ndim != 3 or configs.shape[-1] != 2 or configs.shape[0] < 1:
            raise ConfigurationError(
                f"observations must have shape (n >= 1, N, 2), got {configs.shape}"
            )
        if not np.all(np.isfinite(configs)):
            raise ConfigurationError("observation coordinates must be finite")
        configs.setflags(write=False)
        object.__setattr__(self, "configs", configs)

    @property
    def n(self) -> int:
        return int(self.configs.shape[0])

    @property
    def n_landmarks(self) -> int:
        return int(self.configs.shape[1])

    def __iter__(self):
        return (LandmarkConfig(c) for c in self.configs)

    def euclidean_mean(self) -> LandmarkConfig:
        return LandmarkConfig(self.configs.mean(axis=0))

    def translated(self, shift) -> "ObservationSet":
        return ObservationSet(self.configs + np.asarray(shift, dtype=float))


def _map_ordered(fn: Callable[[int], T], n: int, workers: Optional[int]) -> List[T]:
    """Apply fn to 0..n-1 on a bounded pool, results in index order."""
    workers = workers or get_settings().workers
    if workers <= 1 or n == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(workers, n)) as executor:
        return list(executor.map(fn, range(n)))


def sample_endpoints(
    q0: Points,
    p0: np.ndarray,
    basis: NoiseBasis,
    n_samples: int,
    seed: int,
    kernel: GaussianKernel,
    n_steps: int = 100,
) -> ObservationSet:
    """
    Time-1 configurations of independent stochastic Hamiltonian flows.

    All samples are integrated as one batch; the increments are a pure
    function of (seed, n_samples, n_steps, J), so repeated calls with the
    same seed use common random numbers.

    Args:
        q0: Initial configuration (N, 2)
        p0: Initial momenta (N, 2)
        basis: Noise fields
        n_samples: Number of samples
        seed: Seed of the increments
        kernel: Green's kernel K
        n_steps: Heun steps over unit time

    Returns:
        ObservationSet of n_samples endpoints
    """
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be at least 1, got {n_samples}")
    q0 = as_points(q0)
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != q0.shape:
        raise ConfigurationError(f"momentum shape {p0.shape} does not match {q0.shape}")
    increments = brownian_batch(seed, n_samples, n_steps, basis.n_fields, 1.0 / n_steps)
    q, _ = hamiltonian_batch(
        np.broadcast_to(q0, (n_samples,) + q0.shape),
        np.broadcast_to(p0, (n_samples,) + p0.shape),
        basis,
        increments,
        1.0 / n_steps,
        kernel,
    )
    return ObservationSet(q)


def _run_initial_momentum(run: StringRun) -> np.ndarray:
    """Average p(0) of a run: final strings at zero temperature, trailing iterates otherwise."""
    if run.temperature == "finite":
        return np.mean([p[0] for trace in run.traces for p in trace.history_p], axis=0)
    return np.mean([trace.final.p[0] for trace in run.traces], axis=0)


def _run_energy(run: StringRun) -> float:
    if run.temperature == "finite":
        trailing = [e for trace in run.traces for e in trace.energies[-len(trace.history_q) :]]
        return float(np.mean(trailing))
    return float(np.mean([trace.final.energy for trace in run.traces]))


def mean_string(
    source: LandmarkConfig,
    obs: ObservationSet,
    problem: MatchProblem,
    cfg: OptimizerConfig,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Average of the strings matching source to every observation.

    Each observation is matched under cfg (converged per noise draw at zero
    temperature, trailing iterates at finite temperature) and all resulting
    trajectories are averaged together.

    Returns:
        Mean trajectory (n_t, N, 2)
    """
    if obs.n_landmarks != source.n:
        raise ConfigurationError(
            f"observations have {obs.n_landmarks} landmarks but the source has {source.n}"
        )
    base = problem.with_source(source)

    def match(i: int) -> np.ndarray:
        target = LandmarkConfig(obs.configs[i])
        return run_matching(base.with_target(target), cfg, workers=1).history

    histories = _map_ordered(match, obs.n, workers)
    return ensemble_average(np.concatenate(histories))


@dataclass
class FrechetResult:
    """Template estimate and its outer-iteration history."""

    template: LandmarkConfig
    history: List[np.ndarray]
    objectives: List[float]
    converged: bool

    def history_frame(self) -> pd.DataFrame:
        """Long-format history with columns outer, i, x, y."""
        rows = [
            {"outer": k, "i": i, "x": float(points[i, 0]), "y": float(points[i, 1])}
            for k, points in enumerate(self.history)
            for i in range(points.shape[0])
        ]
        return pd.DataFrame(rows, columns=["outer", "i", "x", "y"])


def frechet_mean(
    obs: ObservationSet,
    init: LandmarkConfig,
    problem: MatchProblem,
    cfg: OptimizerConfig,
    outer: Optional[FrechetConfig] = None,
    workers: Optional[int] = None,
) -> FrechetResult:
    """
    Estimate the template minimizing the mean matched energy to the observations.

    Alternates between matching the current template to every observation and
    moving the template along the mean converged initial momentum,
    I <- I + outer_epsilon * mean_i p_i(0). Each observation's string is warm
    started from the previous outer iteration.

    Args:
        obs: Observations
        init: Initial template
        problem: Kernel, noise basis, lambda and n_t (source and target are replaced)
        cfg: Optimizer parameters of the inner matchings
        outer: Outer-loop step size, tolerance and iteration cap
        workers: Worker threads over observations

    Returns:
        FrechetResult with the template history and the outer objective
    """
    outer = outer or FrechetConfig()
    if obs.n_landmarks != init.n:
        raise ConfigurationError(
            f"observations have {obs.n_landmarks} landmarks but the template has {init.n}"
        )
    template = init.points.copy()
    history = [template.copy()]
    objectives: List[float] = []
    warm: List[Optional[np.ndarray]] = [None] * obs.n
    converged = False
    logger.info("Frechet mean: %d observations, N=%d", obs.n, init.n)

    for k in range(outer.max_outer):
        base = problem.with_source(LandmarkConfig(template))

        def match(i: int) -> StringRun:
            target = LandmarkConfig(obs.configs[i])
            return run_matching(base.with_target(target), cfg, initial_p=warm[i], workers=1)

        runs = _map_ordered(match, obs.n, workers)
        warm = [run.final.p for run in runs]
        objective = float(np.mean([_run_energy(run) for run in runs]))
        update = outer.outer_epsilon * np.mean([_run_initial_momentum(run) for run in runs], axis=0)
        objectives.append(objective)
        template = template + update
        history.append(template.copy())
        step = float(np.max(np.linalg.norm(update, axis=-1)))
        logger.debug("outer iteration %d: objective %.6g, step %.3g", k, objective, step)
        if step < outer.outer_tol:
            converged = True
            break

    if not converged:
        logger.warning("Frechet mean did not converge in %d outer iterations", outer.max_outer)
    return FrechetResult(LandmarkConfig(template), history, objectives, converged)


@dataclass
class InferenceResult:
    """Best parameter values and every evaluated candidate."""

    estimates: Dict[str, float]
    objective: float
    table: pd.DataFrame = field(repr=False)


def _moment_discrepancy(
    obs_moments: Tuple[np.ndarray, np.ndarray], samples: ObservationSet
) -> float:
    mean, cov = sample_moments(samples.configs)
    obs_mean, obs_cov = obs_moments
    return float(np.sum((mean - obs_mean) ** 2) + np.sum((cov - obs_cov) ** 2))


def moment_inference(
    obs: ObservationSet,
    template: LandmarkConfig,
    p0: np.ndarray,
    spec: InferenceSpec,
    kernel: GaussianKernel,
    basis: NoiseBasis,
) -> InferenceResult:
    """
    Fit noise and kernel parameters by matching endpoint moments.

    Coordinate sweeps over the free parameters evaluate a uniform grid over
    each range and keep the candidate minimizing
    |mean_obs - mean_sim|^2 + sum_i ||cov_obs,i - cov_sim,i||_F^2, where the
    simulated endpoints always use the same random numbers.

    Args:
        obs: Observations (at least two)
        template: Source configuration of the generator
        p0: Initial momenta of the generator
        spec: Free parameters, ranges, budget and seed
        kernel: Green's kernel (its scale is the default for kernel_scale)
        basis: Noise fields (amplitude multiplies, noise_scale replaces their scales)

    Returns:
        InferenceResult with the estimates and the full candidate table
    """
    if not spec.parameters:
        raise ConfigurationError("no parameters to infer")
    for name in spec.parameters:
        low, high = spec.ranges[name]
        if high < low or high <= 0:
            raise ConfigurationError(f"empty search range for '{name}': [{low}, {high}]")
    obs_moments = sample_moments(obs.configs)

    current = {
        "amplitude": 1.0,
        "noise_scale": float(basis.scales[0]) if basis.n_fields else 1.0,
        "kernel_scale": kernel.r,
    }
    for name in spec.parameters:
        low, high = spec.ranges[name]
        current[name] = float(np.clip(current[name], low, high))

    def objective(values: Dict[str, float]) -> float:
        candidate = basis.scaled(values["amplitude"])
        if "noise_scale" in spec.parameters and candidate.n_fields:
            candidate = candidate.with_scale(values["noise_scale"])
        samples = sample_endpoints(
            template,
            p0,
            candidate,
            spec.n_samples,
            spec.seed,
            GaussianKernel(values["kernel_scale"]),
            spec.n_steps,
        )
        return _moment_discrepancy(obs_moments, samples)

    rows = []
    best = np.inf
    for sweep in range(spec.sweeps):
        for name in spec.parameters:
            low, high = spec.ranges[name]
            grid = np.linspace(low, high, spec.grid_size)
            scores = []
            for value in grid:
                trial = dict(current, **{name: float(value)})
                if name != "amplitude" and trial[name] <= 0:
                    scores.append(np.inf)
                    continue
                score = objective(trial)
                scores.append(score)
                rows.append({"sweep": sweep, "parameter": name, **trial, "objective": score})
            index = int(np.argmin(scores))
            current[name] = float(grid[index])
            best = float(scores[index])
            logger.debug("sweep %d: %s = %.6g (objective %.6g)", sweep, name, current[name], best)

    estimates = {name: current[name] for name in spec.parameters}
    logger.info("Moment inference estimates: %s", estimates)
    table = pd.DataFrame(
        rows,
        columns=["sweep", "parameter", "amplitude", "noise_scale", "kernel_scale", "objective"],
    )
    return InferenceResult(estimates, best, table)


def em_weights(
    endpoint_samples: Union[Sequence[LandmarkConfig], np.ndarray], target: Points, lam: float
) -> np.ndarray:
    """
    Self-normalized weights w_k proportional to exp(-|endpoint_k - y|^2 / (2 lambda^2)).

    Raises:
        ConfigurationError: If lambda is not positive or there are no samples
        WeightUnderflowError: If every raw weight underflows to zero
    """
    if not lam > 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")
    endpoints = np.array([as_points(e) for e in endpoint_samples], dtype=float)
    if endpoints.shape[0] == 0:
        raise ConfigurationError("em_weights needs at least one sample")
    distances = np.sum((endpoints - as_points(target)) ** 2, axis=(1, 2))
    raw = np.exp(-distances / (2.0 * lam**2))
    total = raw.sum()
    if total == 0.0:
        raise WeightUnderflowError(
            f"all {len(raw)} importance weights underflowed at lambda={lam}; "
            "increase lambda or use bridge sampling"
        )
    return raw / total


@dataclass
class EMGradient:
    """Weighted and unweighted ensemble gradients of one EM iteration."""

    weighted: np.ndarray
    unweighted: np.ndarray
    weights: np.ndarray
    states: List[StringState]

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def em_gradient(
    state: StringState, problem: MatchProblem, cfg: OptimizerConfig, M: int, iteration: int = 0
) -> EMGradient:
    """
    String gradients of M noise paths and their importance-weighted combination.

    Path k of an iteration uses the sub-seed (seed, iteration, k).
    """
    if M < 1:
        raise ConfigurationError(f"M must be at least 1, got {M}")
    states = []
    gradients = []
    for k in range(M):
        path = problem.draw_path(derive_seed(cfg.seed, iteration, k), cfg.brownian_refinement)
        evaluated = problem.evaluate(state.p, path)
        states.append(evaluated)
        gradients.append(string_gradient(evaluated, problem.target, problem.lam))
    gradients_array = np.stack(gradients)
    weights = em_weights([s.q[-1] for s in states], problem.target, problem.lam)
    weighted = np.einsum("k,k...->...", weights, gradients_array)
    return EMGradient(weighted, gradients_array.mean(axis=0), weights, states)


def em_step(
    state: StringState, problem: MatchProblem, cfg: OptimizerConfig, M: int, iteration: int = 0
) -> StringState:
    """
    One EM update p <- p - epsilon * sum_k w_k g_k.

    The returned state is evaluated under the first of the M paths.

    Raises:
        WeightUnderflowError: If the importance weights underflow
    """
    gradient = em_gradient(state, problem, cfg, M, iteration)
    return problem.evaluate(state.p - cfg.epsilon * gradient.weighted, gradient.states[0].path)


@dataclass
class EMRun:
    """Iterates of the EM string iteration."""

    final: StringState
    energies: List[float]
    residuals: List[float]
    effective_sizes: List[float]


def run_em(problem: MatchProblem, cfg: OptimizerConfig, n_iterations: int, M: int) -> EMRun:
    """Iterate em_step from p == 0, recording the weighted energy and gradient norm."""
    state = problem.evaluate(np.zeros((problem.n_t, problem.source.n, 2)), None)
    energies: List[float] = []
    residuals: List[float] = []
    sizes: List[float] = []
    logger.info("EM iteration: M=%d, %d iterations", M, n_iterations)
    for k in range(n_iterations):
        gradient = em_gradient(state, problem, cfg, M, k)
        energies.append(float(np.dot(gradient.weights, [s.energy for s in gradient.states])))
        residuals.append(float(np.max(np.linalg.norm(gradient.weighted, axis=-1))))
        sizes.append(gradient.effective_sample_size)
        state = problem.evaluate(state.p - cfg.epsilon * gradient.weighted, gradient.states[0].path)
    return EMRun(state, energies, residuals, sizes)
