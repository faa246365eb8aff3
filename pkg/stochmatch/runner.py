"""
Command orchestration: turns a validated RunConfig into library calls and
artifacts on disk.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .errors import DataFormatError, StochMatchError
from .figures import emit_svg_mean_evolution, emit_svg_montage, emit_svg_strings
from .images import run_image_matching, ssd
from .io import (
    ArtifactWriter,
    encode_pgm,
    landmark_frame,
    load_image,
    load_landmarks,
    load_noise_basis,
    statistics_frame,
    trajectory_frame,
    velocity_frame,
)
from .kernels import (
    BrownianPath,
    GaussianKernel,
    NoiseBasis,
    basis_summary,
    derive_seed,
    make_grid_basis,
)
from .landmarks import LandmarkConfig, hamiltonian_flow
from .models import (
    EMSpec,
    IterationRecord,
    MeanSpec,
    NoiseSpec,
    RunConfig,
    RunManifest,
    SamplingSpec,
)
from .optimizer import MatchProblem, deterministic_beg, endpoint_statistics, run_matching
from .statistics import (
    ObservationSet,
    frechet_mean,
    mean_string,
    moment_inference,
    run_em,
    sample_endpoints,
)

logger = logging.getLogger(__name__)

# Sub-seed stream keys, kept apart from the ensemble member indices
OBSERVATION_STREAM = 1_000_003
SAMPLE_STREAM = 1_000_033

MEAN_COLUMNS = ["t", "i", "qx", "qy"]

Extent = Tuple[float, float, float, float]


class RunContext:
    """State shared by one command: config, writer and the manifest being assembled."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.writer = ArtifactWriter(config.output_dir)
        self.diagnostics: List[IterationRecord] = []
        self.summary: Dict[str, object] = {}
        self.converged: Optional[bool] = None

    @property
    def seed(self) -> int:
        return self.config.optimizer.seed

    @property
    def kernel(self) -> GaussianKernel:
        return GaussianKernel(self.config.problem.kernel_scale)

    def manifest(self, partial: bool = False, error: Optional[str] = None) -> RunManifest:
        return RunManifest(
            software_version=__version__,
            command=self.config.command,
            seed=self.seed,
            config=self.config.model_dump(mode="json", by_alias=True),
            problem_hash=problem_hash(self.config),
            converged=self.converged,
            partial=partial,
            error=error,
            diagnostics=self.diagnostics,
            summary=self.summary,
        )


def problem_hash(config: RunConfig) -> str:
    """SHA-256 over the problem section and the bytes of every referenced input file."""
    digest = hashlib.sha256()
    section = config.problem.model_dump(mode="json", by_alias=True)
    digest.update(json.dumps(section, sort_keys=True).encode())
    problem = config.problem
    paths = [problem.source, problem.target, problem.source_image, problem.target_image]
    if problem.noise is not None:
        paths.append(problem.noise.file)
    if config.observations is not None:
        paths.extend(config.observations.files)
    for path in paths:
        if path and Path(path).is_file():
            digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def build_basis(spec: Optional[NoiseSpec], extent: Extent) -> NoiseBasis:
    """Noise basis from a document, or a grid over the padded data extent."""
    if spec is None:
        return NoiseBasis.empty()
    if spec.file is not None:
        return load_noise_basis(spec.file)
    if spec.bbox is not None:
        bbox = list(spec.bbox)
    else:
        x_min, y_min, x_max, y_max = extent
        pad = spec.padding
        bbox = [x_min - pad, y_min - pad, x_max + pad, y_max + pad]
    return make_grid_basis(
        bbox, spec.n_per_axis, spec.scale, spec.amplitude, spec.kind, spec.split_axes
    )


def points_extent(*configs: np.ndarray) -> Extent:
    """Bounding box of landmark sets; a zero-width side is widened to unit length."""
    points = np.concatenate([np.asarray(c, dtype=float).reshape(-1, 2) for c in configs])
    x_min, y_min = points.min(axis=0)
    x_max, y_max = points.max(axis=0)
    if x_max - x_min <= 0:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max - y_min <= 0:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    return (float(x_min), float(y_min), float(x_max), float(y_max))


def _landmark_problem(
    ctx: RunContext, source: LandmarkConfig, target: LandmarkConfig
) -> MatchProblem:
    problem = ctx.config.problem
    basis = build_basis(problem.noise, points_extent(source.points, target.points))
    logger.info("Noise basis: %s", basis_summary(basis))
    return MatchProblem(source, target, problem.lam, ctx.kernel, basis, problem.n_t)


def mean_frame(q: np.ndarray) -> pd.DataFrame:
    """Long table t,i,qx,qy of a mean string (n_t, N, 2)."""
    n_t, n = q.shape[:2]
    return pd.DataFrame(
        {
            "t": np.repeat(np.linspace(0.0, 1.0, n_t), n),
            "i": np.tile(np.arange(n), n_t),
            "qx": q[..., 0].ravel(),
            "qy": q[..., 1].ravel(),
        }
    )[MEAN_COLUMNS]


def observation_frame(obs: ObservationSet) -> pd.DataFrame:
    """Long table sample,i,x,y of an observation set."""
    frames = []
    for k, points in enumerate(obs.configs):
        frame = landmark_frame(points)
        frame.insert(0, "sample", k)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def command_match(ctx: RunContext) -> None:
    """Zero- or finite-temperature landmark matching."""
    config = ctx.config
    source = load_landmarks(config.problem.source)
    target = load_landmarks(config.problem.target)
    problem = _landmark_problem(ctx, source, target)
    run = run_matching(problem, config.optimizer)

    rows = run.records()
    ctx.diagnostics = [IterationRecord(**row) for row in rows]
    ctx.converged = run.converged if run.temperature == "zero" else None
    ctx.writer.write_csv(
        "diagnostics.csv", pd.DataFrame(rows, columns=["iteration", "member", "energy", "residual"])
    )
    ctx.writer.write_csv("string.csv", trajectory_frame((t.final.q, t.final.p) for t in run.traces))

    strings = run.history
    mean = run.mean_string
    covariances = None
    if run.temperature == "finite":
        history = [(q, p) for t in run.traces for q, p in zip(t.history_q, t.history_p)]
        ctx.writer.write_csv("history.csv", trajectory_frame(history))
    if len(strings) >= 2:
        mean, covariances = endpoint_statistics(run)
        ctx.writer.write_csv("statistics.csv", statistics_frame(mean, covariances))
    ctx.writer.write_csv("mean_string.csv", mean_frame(mean))

    ctx.summary = {
        "final_energy": run.final.energy,
        "final_residual": run.residuals[-1] if run.residuals else None,
        "iterations": [trace.iterations for trace in run.traces],
        "n_fields": problem.basis.n_fields,
    }
    if config.figures:
        svg = emit_svg_strings(
            source.points,
            target.points,
            list(strings),
            mean_string=mean,
            endpoints=strings[:, -1],
            covariances=covariances,
            t_stride=max(1, problem.n_t // 5),
            title=f"{run.temperature} temperature",
        )
        ctx.writer.write_bytes("strings.svg", svg)


def command_image_match(ctx: RunContext) -> None:
    """Grid-based image matching."""
    config = ctx.config
    problem = config.problem
    source = load_image(problem.source_image)
    target = load_image(problem.target_image)
    if source.shape != target.shape:
        raise DataFormatError(
            problem.target_image, f"image shape {target.shape} differs from source {source.shape}"
        )
    basis = build_basis(problem.noise, source.extent)
    run = run_image_matching(
        source, target, problem.lam, ctx.kernel, basis, config.optimizer, problem.n_t
    )
    trace = run.traces[0]
    records = [
        IterationRecord(iteration=k, energy=energy, ssd=value, residual=residual)
        for k, (energy, value, residual) in enumerate(
            zip(trace.energies, trace.ssd, trace.residuals)
        )
    ]
    ctx.diagnostics = records
    ctx.converged = run.converged if config.optimizer.temperature == "zero" else None
    frame = pd.DataFrame(
        [r.model_dump(include={"iteration", "energy", "ssd", "residual"}) for r in records],
        columns=["iteration", "energy", "ssd", "residual"],
    )
    if trace.mean_ssd:
        frame["mean_ssd"] = trace.mean_ssd[: len(frame)]
    ctx.writer.write_csv("diagnostics.csv", frame)
    ctx.writer.write_csv("velocity.csv", velocity_frame(run.velocities, source))

    ctx.writer.write_bytes("warped.pgm", encode_pgm(run.warped))
    ctx.summary = {"initial_ssd": ssd(source, target), "final_ssd": ssd(run.warped, target)}
    if config.figures:
        ctx.writer.write_bytes("montage.svg", emit_svg_montage(run.snapshots()))


def initial_momentum(
    ctx: RunContext, source: LandmarkConfig, momentum_path: Optional[str]
) -> np.ndarray:
    """p(0) from a momentum file, from deterministic matching to the target, or zero."""
    config = ctx.config
    if momentum_path is not None:
        momentum = load_landmarks(momentum_path).points
        if momentum.shape != source.points.shape:
            raise DataFormatError(
                momentum_path, f"momentum has {momentum.shape[0]} rows, expected {source.n}"
            )
        return momentum
    if config.problem.target is not None:
        target = load_landmarks(config.problem.target)
        problem = _landmark_problem(ctx, source, target)
        return deterministic_beg(problem, config.optimizer).final.p[0].copy()
    return np.zeros_like(source.points)


def _observations(ctx: RunContext, source: LandmarkConfig, basis: NoiseBasis) -> ObservationSet:
    spec = ctx.config.observations
    if spec.files:
        return ObservationSet([load_landmarks(f) for f in spec.files])
    sampling = spec.sample
    p0 = initial_momentum(ctx, source, sampling.momentum)
    seed = derive_seed(ctx.seed, OBSERVATION_STREAM)
    return sample_endpoints(
        source, p0, basis, sampling.n_samples, seed, ctx.kernel, sampling.n_steps
    )


def command_sample(ctx: RunContext) -> None:
    """Endpoint samples of the stochastic Hamiltonian flow."""
    config = ctx.config
    source = load_landmarks(config.problem.source)
    sampling = config.sampling or SamplingSpec()
    basis = build_basis(config.problem.noise, points_extent(source.points))
    p0 = initial_momentum(ctx, source, sampling.momentum)
    seed = derive_seed(ctx.seed, SAMPLE_STREAM)
    obs = sample_endpoints(
        source, p0, basis, sampling.n_samples, seed, ctx.kernel, sampling.n_steps
    )
    ctx.writer.write_csv("samples.csv", observation_frame(obs))
    ctx.writer.write_csv("momentum.csv", landmark_frame(p0))

    quiet = BrownianPath.zeros(sampling.n_steps, 0, 1.0 / sampling.n_steps)
    q_det, _ = hamiltonian_flow(source, p0, NoiseBasis.empty(), quiet, ctx.kernel)
    deviation = np.abs(obs.configs.mean(axis=0) - q_det[-1])
    ctx.summary = {"n_samples": obs.n, "mean_endpoint_deviation": float(deviation.max())}
    if config.figures:
        svg = emit_svg_strings(
            source.points, q_det[-1], [q_det], endpoints=obs.configs, title="samples"
        )
        ctx.writer.write_bytes("samples.svg", svg)


def command_mean(ctx: RunContext) -> None:
    """Template estimation or mean string over observations."""
    config = ctx.config
    source = load_landmarks(config.problem.source)
    basis = build_basis(config.problem.noise, points_extent(source.points))
    obs = _observations(ctx, source, basis)
    problem = MatchProblem(
        source, source, config.problem.lam, ctx.kernel, basis, config.problem.n_t
    )
    ctx.writer.write_csv("observations.csv", observation_frame(obs))
    spec = config.mean or MeanSpec()

    if spec.kind == "string":
        q_mean = mean_string(source, obs, problem, config.optimizer)
        ctx.writer.write_csv("mean_string.csv", mean_frame(q_mean))
        ctx.summary = {"n_observations": obs.n}
        if config.figures:
            svg = emit_svg_strings(
                source.points,
                obs.euclidean_mean().points,
                [],
                mean_string=q_mean,
                endpoints=obs.configs,
            )
            ctx.writer.write_bytes("mean_string.svg", svg)
        return

    result = frechet_mean(obs, source, problem, config.optimizer, spec.frechet)
    ctx.converged = result.converged
    ctx.diagnostics = [
        IterationRecord(iteration=k, energy=e) for k, e in enumerate(result.objectives)
    ]
    objective = pd.DataFrame(
        {"outer": np.arange(len(result.objectives)), "objective": result.objectives}
    )
    ctx.writer.write_csv("objective.csv", objective)
    ctx.writer.write_csv("template.csv", landmark_frame(result.template.points))
    ctx.writer.write_csv("frechet_history.csv", result.history_frame())
    ctx.summary = {"n_observations": obs.n, "outer_iterations": len(result.objectives)}
    if config.figures:
        svg = emit_svg_mean_evolution(result.history, obs.configs)
        ctx.writer.write_bytes("mean_evolution.svg", svg)


def command_infer(ctx: RunContext) -> None:
    """Moment-based parameter inference."""
    config = ctx.config
    source = load_landmarks(config.problem.source)
    basis = build_basis(config.problem.noise, points_extent(source.points))
    obs = _observations(ctx, source, basis)
    momentum = config.sampling.momentum if config.sampling is not None else None
    p0 = initial_momentum(ctx, source, momentum)
    result = moment_inference(obs, source, p0, config.inference, ctx.kernel, basis)
    ctx.writer.write_csv("inference.csv", result.table)
    ctx.summary = {"estimates": result.estimates, "objective": result.objective}


def command_em(ctx: RunContext) -> None:
    """Importance-weighted string iteration."""
    config = ctx.config
    source = load_landmarks(config.problem.source)
    target = load_landmarks(config.problem.target)
    problem = _landmark_problem(ctx, source, target)
    spec = config.em or EMSpec()
    result = run_em(problem, config.optimizer, spec.n_iterations, spec.samples)
    frame = pd.DataFrame(
        {
            "iteration": np.arange(len(result.energies)),
            "energy": result.energies,
            "residual": result.residuals,
            "ess": result.effective_sizes,
        }
    )
    ctx.diagnostics = [
        IterationRecord(iteration=k, energy=e, residual=r)
        for k, (e, r) in enumerate(zip(result.energies, result.residuals))
    ]
    ctx.writer.write_csv("diagnostics.csv", frame)
    ctx.writer.write_csv("string.csv", trajectory_frame([(result.final.q, result.final.p)]))
    ctx.summary = {"final_energy": result.final.energy}
    if config.figures:
        svg = emit_svg_strings(source.points, target.points, [], mean_string=result.final.q)
        ctx.writer.write_bytes("strings.svg", svg)


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "match": command_match,
    "image-match": command_image_match,
    "sample": command_sample,
    "mean": command_mean,
    "infer": command_infer,
    "em": command_em,
}


def run(config: RunConfig) -> int:
    """
    Execute one command and write its artifacts.

    The manifest is written last, also when the command fails, in which case
    it is flagged partial and carries the error message.

    Returns:
        0 on success, 1 when the command raised
    """
    ctx = RunContext(config)
    logger.info("Running '%s' with seed %d into %s", config.command, ctx.seed, config.output_dir)
    try:
        COMMANDS[config.command](ctx)
    except StochMatchError as e:
        logger.error("Command '%s' failed: %s", config.command, e)
        ctx.writer.write_manifest(ctx.manifest(partial=True, error=str(e)))
        return 1
    except Exception as e:
        logger.error("Unhandled exception in '%s': %s", config.command, e, exc_info=True)
        ctx.writer.write_manifest(ctx.manifest(partial=True, error=f"{type(e).__name__}: {e}"))
        return 1
    ctx.writer.write_manifest(ctx.manifest())
    logger.info("Finished '%s'", config.command)
    return 0
