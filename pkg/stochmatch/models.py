"""
Pydantic models for configuration documents, noise-basis documents and run manifests.

Every model rejects unknown keys so that a misspelled parameter is a load-time
error instead of a silently ignored value.
"""

from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

KernelKind = Literal["gaussian", "bspline"]
Temperature = Literal["zero", "finite"]
Command = Literal["match", "image-match", "sample", "mean", "infer", "em"]
InferenceParameter = Literal["amplitude", "noise_scale", "kernel_scale"]


class StrictModel(BaseModel):
    """Base model with unknown-key rejection."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class NoiseEntry(StrictModel):
    """One noise field sigma(x) = amplitude * k_scale(|x - center|)."""

    center: List[float] = Field(..., min_length=2, max_length=2, description="Field center")
    amplitude: List[float] = Field(..., min_length=2, max_length=2, description="Vector amplitude")
    scale: float = Field(..., gt=0, description="Kernel length scale")
    kind: KernelKind = Field("gaussian", description="Kernel profile")


class NoiseBasisDocument(StrictModel):
    """JSON document form of a noise basis."""

    entries: List[NoiseEntry] = Field(default_factory=list, description="Noise fields")


class OptimizerConfig(StrictModel):
    """Parameters of the string iteration."""

    epsilon: float = Field(0.1, gt=0, description="Step size in the string time s")
    n_s: int = Field(200, ge=1, description="Maximum number of string iterations")
    tol: float = Field(1e-4, ge=0, description="Tolerance on the max-norm of the string gradient")
    temperature: Temperature = Field("zero", description="Fixed (zero) or resampled (finite) noise")
    ensemble_size: int = Field(1, ge=1, description="Number of independent strings M")
    seed: int = Field(0, ge=0, lt=2**64, description="Root seed of every random stream")
    avg_window: Optional[int] = Field(
        None, ge=1, description="Trailing iterations used for endpoint statistics"
    )
    brownian_refinement: int = Field(
        1, ge=1, description="Brownian increments per integration interval"
    )

    @model_validator(mode="after")
    def default_window(self):
        """Fill the statistics window from n_s when it is not given."""
        if self.avg_window is None:
            self.avg_window = min(200, max(1, self.n_s // 2))
        return self

    @property
    def window(self) -> int:
        return int(self.avg_window or 1)


class FrechetConfig(StrictModel):
    """Outer loop of the template estimation."""

    outer_epsilon: float = Field(1.0, gt=0, description="Template step size")
    outer_tol: float = Field(1e-4, ge=0, description="Stop when the update max-norm is below this")
    max_outer: int = Field(20, ge=1, description="Maximum number of template updates")


class InferenceSpec(StrictModel):
    """Free parameters, ranges and sample sizes of the moment-matching search."""

    parameters: List[InferenceParameter] = Field(
        ..., min_length=1, description="Parameters to infer"
    )
    ranges: Dict[str, List[float]] = Field(
        ..., description="Search interval [low, high] per parameter"
    )
    grid_size: int = Field(11, ge=2, description="Candidate values per parameter and sweep")
    n_samples: int = Field(200, ge=2, description="Simulated endpoints per candidate")
    n_steps: int = Field(100, ge=1, description="Time steps of each simulated flow")
    sweeps: int = Field(1, ge=1, description="Coordinate sweeps over the parameters")
    seed: int = Field(0, ge=0, lt=2**64, description="Seed of the common random numbers")

    @field_validator("parameters")
    @classmethod
    def unique_parameters(cls, v):
        """Reject repeated parameter names."""
        if len(set(v)) != len(v):
            raise ValueError("inference parameters must be unique")
        return v

    @model_validator(mode="after")
    def ranges_cover_parameters(self):
        """Every free parameter needs a positive, non-empty range."""
        for name in self.parameters:
            bounds = self.ranges.get(name)
            if bounds is None or len(bounds) != 2:
                raise ValueError(f"range for '{name}' must be [low, high]")
            low, high = bounds
            if low < 0 or high <= 0 or high < low:
                raise ValueError(f"range for '{name}' must satisfy 0 <= low <= high, high > 0")
        unknown = sorted(set(self.ranges) - set(self.parameters))
        if unknown:
            raise ValueError(f"ranges given for parameters not being inferred: {unknown}")
        return self


class NoiseSpec(StrictModel):
    """Noise basis either read from a JSON document or laid out on a grid."""

    file: Optional[str] = Field(None, description="Noise basis JSON document")
    n_per_axis: int = Field(4, ge=1, description="Grid centers per axis")
    scale: float = Field(0.5, gt=0, description="Shared length scale")
    amplitude: Union[float, List[float]] = Field(
        0.05, description="Shared amplitude (scalar or 2-vector)"
    )
    kind: KernelKind = Field("gaussian", description="Kernel profile of every field")
    split_axes: bool = Field(False, description="Two axis-aligned fields per center")
    bbox: Optional[List[float]] = Field(
        None, min_length=4, max_length=4, description="Grid rectangle; defaults to the data extent"
    )
    padding: float = Field(0.25, ge=0, description="Margin added around the data extent")

    @field_validator("amplitude")
    @classmethod
    def amplitude_shape(cls, v):
        """Vector amplitudes must have two components."""
        if isinstance(v, list) and len(v) != 2:
            raise ValueError("amplitude vector must have two components")
        return v


class ProblemSpec(StrictModel):
    """Matching problem: data paths, penalty weight, kernel and time grid."""

    source: Optional[str] = Field(None, description="Source landmarks (CSV i,x,y)")
    target: Optional[str] = Field(None, description="Target landmarks (CSV i,x,y)")
    source_image: Optional[str] = Field(None, description="Source image (PGM)")
    target_image: Optional[str] = Field(None, description="Target image (PGM)")
    lam: float = Field(..., gt=0, alias="lambda", description="Inexactness weight lambda")
    kernel_scale: float = Field(..., gt=0, description="Scale of the Gaussian Green's kernel")
    n_t: int = Field(20, ge=2, description="Points of the uniform t-grid")
    noise: Optional[NoiseSpec] = Field(None, description="Noise basis; absent means no noise")


class SamplingSpec(StrictModel):
    """Generation of observations from the Hamiltonian sampler."""

    n_samples: int = Field(50, ge=1, description="Number of samples")
    n_steps: int = Field(100, ge=1, description="Time steps of each sampled flow")
    momentum: Optional[str] = Field(
        None, description="Initial momentum CSV (i,x,y); defaults to matching source to target"
    )


class ObservationSpec(StrictModel):
    """Observations read from files or sampled from the source."""

    files: List[str] = Field(default_factory=list, description="Observation CSV files")
    sample: Optional[SamplingSpec] = Field(None, description="Sample observations instead")

    @model_validator(mode="after")
    def one_source(self):
        """Exactly one way of obtaining observations."""
        if bool(self.files) == (self.sample is not None):
            raise ValueError("give either observation files or a sampling spec, not both or none")
        return self


class MeanSpec(StrictModel):
    """Which mean to compute for the `mean` command."""

    kind: Literal["frechet", "string"] = Field(
        "frechet", description="Template mean or mean string"
    )
    frechet: FrechetConfig = Field(default_factory=FrechetConfig)


class EMSpec(StrictModel):
    """Importance-weighted string iteration."""

    n_iterations: int = Field(50, ge=1, description="EM iterations")
    samples: int = Field(16, ge=1, description="Noise paths M per iteration")


class RunConfig(StrictModel):
    """A complete run: one command, its problem and optimizer parameters."""

    command: Command
    problem: ProblemSpec
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    output_dir: str = Field("out", description="Directory receiving all artifacts")
    observations: Optional[ObservationSpec] = None
    sampling: Optional[SamplingSpec] = None
    mean: Optional[MeanSpec] = None
    inference: Optional[InferenceSpec] = None
    em: Optional[EMSpec] = None
    figures: bool = Field(True, description="Emit SVG figures")

    @model_validator(mode="after")
    def command_inputs(self):
        """Each command names the inputs it cannot run without."""
        problem = self.problem
        if self.command == "image-match":
            if not (problem.source_image and problem.target_image):
                raise ValueError("image-match needs problem.source_image and problem.target_image")
            return self
        if not problem.source:
            raise ValueError(f"{self.command} needs problem.source")
        if self.command in ("match", "em") and not problem.target:
            raise ValueError(f"{self.command} needs problem.target")
        if self.command in ("mean", "infer") and self.observations is None:
            raise ValueError(f"{self.command} needs an observations section")
        if self.command == "infer" and self.inference is None:
            raise ValueError("infer needs an inference section")
        return self


class IterationRecord(BaseModel):
    """Diagnostics of one string iteration."""

    iteration: int
    member: int = 0
    energy: float
    residual: Optional[float] = None
    ssd: Optional[float] = None


class FileRecord(BaseModel):
    """One written artifact."""

    path: str
    sha256: str
    size: int


class RunManifest(BaseModel):
    """Everything needed to reproduce and audit a run."""

    model_config = ConfigDict(extra="forbid")

    software_version: str
    command: Command
    seed: int
    config: Dict[str, Any]
    problem_hash: str
    converged: Optional[bool] = None
    partial: bool = False
    error: Optional[str] = None
    diagnostics: List[IterationRecord] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)
    files: List[FileRecord] = Field(default_factory=list)
