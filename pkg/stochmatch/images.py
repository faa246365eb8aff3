"""
Image Dynamics Module

Grid-based stochastic image matching. Velocity strings u(t_k) live on the
pixel grid; maps are built by composing semi-Lagrangian Heun steps of the
perturbed velocity u dt + sum_l sigma_l dW^l, images are warped by bilinear
resampling with clamped boundaries, and the string is updated with the
smoothed image force.

Pixel (i, j) of an image sits at origin + (i * h_x, j * h_y).
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.ndimage import correlate1d, map_coordinates

from .errors import ConfigurationError, IntegrationError
from .kernels import BrownianPath, GaussianKernel, NoiseBasis, brownian_sample, derive_seed
from .models import OptimizerConfig
from .settings import get_settings

logger = logging.getLogger(__name__)

# Gaussian smoothing is truncated at this many kernel scales
TRUNCATE = 4.0


@dataclass(frozen=True, eq=False)
class ImageField:
    """
    Scalar image sampled on a regular grid.

    Attributes:
        data: Intensities, shape (n_x, n_y)
        spacing: Grid spacing (h_x, h_y)
        origin: Position of pixel (0, 0)
    """

    data: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2 or min(data.shape) < 2:
            raise ConfigurationError(
                f"images must be 2-D with at least 2x2 pixels, got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("image values must be finite")
        if min(self.spacing) <= 0:
            raise ConfigurationError(f"grid spacing must be positive, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """Bounding box (x_min, y_min, x_max, y_max) of the pixel centers."""
        nx, ny = self.shape
        hx, hy = self.spacing
        ox, oy = self.origin
        return (ox, oy, ox + (nx - 1) * hx, oy + (ny - 1) * hy)

    def coordinates(self) -> np.ndarray:
        """Pixel positions, shape (n_x, n_y, 2)."""
        return grid_coordinates(self.shape, self.spacing, self.origin)

    def with_data(self, data: np.ndarray) -> "ImageField":
        return ImageField(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Vector field on an image grid, data of shape (n_x, n_y, 2)."""

    data: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3 or data.shape[-1] != 2:
            raise ConfigurationError(
                f"vector fields must have shape (n_x, n_y, 2), got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ConfigurationError("vector field values must be finite")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class MapField:
    """Sampled map of the domain into itself; data holds target positions (n_x, n_y, 2)."""

    data: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)
    origin: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls, shape, spacing=(1.0, 1.0), origin=(0.0, 0.0)) -> "MapField":
        return cls(grid_coordinates(shape, spacing, origin), tuple(spacing), tuple(origin))


@dataclass(frozen=True, eq=False)
class VelocityString:
    """
    Velocity fields u(t_k) on a uniform t-grid and their momenta, u = K m.

    Attributes:
        u: Velocities, shape (n_t, n_x, n_y, 2)
        m: Momentum fields, shape (n_t, n_x, n_y, 2)
    """

    u: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.m.shape or self.u.ndim != 4 or self.u.shape[0] < 2:
            raise ConfigurationError(
                f"velocity string needs matching (n_t >= 2, n_x, n_y, 2) arrays, got {self.u.shape}"
            )

    @classmethod
    def zeros(cls, n_t: int, shape: Sequence[int]) -> "VelocityString":
        return cls(np.zeros((n_t,) + tuple(shape) + (2,)), np.zeros((n_t,) + tuple(shape) + (2,)))

    @property
    def n_t(self) -> int:
        return int(self.u.shape[0])

    @property
    def fields(self) -> List[VectorField]:
        return [VectorField(u) for u in self.u]


def grid_coordinates(shape, spacing=(1.0, 1.0), origin=(0.0, 0.0)) -> np.ndarray:
    """Positions of the grid nodes, shape (n_x, n_y, 2)."""
    nx, ny = shape
    xs = origin[0] + np.arange(nx) * spacing[0]
    ys = origin[1] + np.arange(ny) * spacing[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def _check_finite(array: np.ndarray, what: str):
    if not np.all(np.isfinite(array)):
        raise IntegrationError(f"non-finite {what}; reduce the step size or the noise amplitude")


def _sample(values: np.ndarray, points: np.ndarray, spacing, origin) -> np.ndarray:
    """
    Bilinear samples of a gridded array at domain positions, clamped at the boundary.

    Args:
        values: Array (n_x, n_y) or (n_x, n_y, C)
        points: Positions (..., 2)

    Returns:
        Samples of shape points.shape[:-1] (+ (C,))
    """
    coords = np.stack(
        [(points[..., 0] - origin[0]) / spacing[0], (points[..., 1] - origin[1]) / spacing[1]]
    )
    if values.ndim == 2:
        return map_coordinates(values, coords, order=1, mode="nearest")
    return np.stack(
        [
            map_coordinates(values[..., c], coords, order=1, mode="nearest")
            for c in range(values.shape[-1])
        ],
        axis=-1,
    )


def image_gradient(image: ImageField) -> VectorField:
    """Central differences in the interior, one-sided at the boundary."""
    gx, gy = np.gradient(image.data, *image.spacing, edge_order=1)
    return VectorField(np.stack([gx, gy], axis=-1), image.spacing, image.origin)


def gaussian_weights(r: float, h: float) -> np.ndarray:
    """Mass-normalized 1-D Gaussian taps exp(-(m h)^2 / (2 r^2)), truncated at 4r."""
    radius = int(np.ceil(TRUNCATE * r / h))
    offsets = np.arange(-radius, radius + 1) * h
    weights = np.exp(-(offsets**2) / (2.0 * r**2))
    return weights / weights.sum()


def smooth(data: np.ndarray, kernel: GaussianKernel, spacing=(1.0, 1.0)) -> np.ndarray:
    """Separable Gaussian smoothing of vector data (..., n_x, n_y, 2) along the grid axes."""
    data = np.asarray(data, dtype=float)
    out = correlate1d(data, gaussian_weights(kernel.r, spacing[0]), axis=-3, mode="nearest")
    return correlate1d(out, gaussian_weights(kernel.r, spacing[1]), axis=-2, mode="nearest")


def apply_green_kernel(v: VectorField, kernel: GaussianKernel) -> VectorField:
    """Componentwise Gaussian convolution K v, truncated at 4r and mass-normalized."""
    return VectorField(smooth(v.data, kernel, v.spacing), v.spacing, v.origin)


def grid_noise_fields(
    basis: NoiseBasis, shape, spacing=(1.0, 1.0), origin=(0.0, 0.0), normalize: bool = True
) -> np.ndarray:
    """
    Noise fields sampled on the grid, shape (n_x, n_y, J, 2).

    With normalize, each field is divided by the sum of all kernel profiles at
    the pixel so the total noise amplitude is uniform over the domain.
    """
    points = grid_coordinates(shape, spacing, origin)
    if basis.n_fields == 0:
        return np.zeros(tuple(shape) + (0, 2))
    profiles, _ = basis.profiles(points)
    fields = profiles[..., None] * basis.amplitudes
    if normalize:
        total = profiles.sum(axis=-1)
        total = np.where(total > 1e-12, total, 1.0)
        fields = fields / total[..., None, None]
    return fields


def integrate_maps(
    us: VelocityString,
    noise_fields: np.ndarray,
    path: Optional[BrownianPath],
    spacing=(1.0, 1.0),
    origin=(0.0, 0.0),
) -> Tuple[List[MapField], List[MapField]]:
    """
    Build g_{t_k,0}^{-1} and g_{t_k,1}^{-1} for every grid time.

    Each interval uses the perturbed displacement v(x) = u(x) dt + sum_l sigma_l(x) dW^l
    with Heun stepping on the map increments. Maps are composed through their
    displacement from the identity, resampled bilinearly.

    Args:
        us: Velocity string
        noise_fields: Noise fields on the grid (n_x, n_y, J, 2)
        path: Brownian increments over unit time (None for no noise)

    Returns:
        Tuple (fwd_inv, bwd) of n_t maps each
    """
    n_t = us.n_t
    shape = us.u.shape[1:3]
    n_fields = noise_fields.shape[-2]
    dt = 1.0 / (n_t - 1)
    if path is None:
        increments = np.zeros((n_t - 1, n_fields))
    else:
        if path.n_fields != n_fields:
            raise ConfigurationError(
                f"Brownian path has {path.n_fields} channels but there are {n_fields} noise fields"
            )
        increments = path.aggregate(n_t - 1).increments

    identity = grid_coordinates(shape, spacing, origin)

    def displacement(k: int, j: int) -> np.ndarray:
        # u(t_k) dt + noise of interval j on the grid
        noise = np.einsum("xyjd,j->xyd", noise_fields, increments[j]) if n_fields else 0.0
        return us.u[k] * dt + noise

    fwd = [identity.copy()]
    for k in range(n_t - 1):
        a = displacement(k, k)
        b = displacement(k + 1, k)
        predicted = identity - b
        back = identity - 0.5 * (b + _sample(a, predicted, spacing, origin))
        offset = fwd[k] - identity
        fwd.append(back + _sample(offset, back, spacing, origin))
        _check_finite(fwd[-1], "forward map")

    bwd = [identity.copy()]
    for k in range(n_t - 2, -1, -1):
        a = displacement(k, k)
        b = displacement(k + 1, k)
        predicted = identity + a
        ahead = identity + 0.5 * (a + _sample(b, predicted, spacing, origin))
        offset = bwd[0] - identity
        bwd.insert(0, ahead + _sample(offset, ahead, spacing, origin))
        _check_finite(bwd[0], "backward map")

    wrap = lambda data: MapField(data, tuple(spacing), tuple(origin))  # noqa: E731
    return [wrap(m) for m in fwd], [wrap(m) for m in bwd]


def warp_image(image: ImageField, mapping: MapField) -> ImageField:
    """Push-forward I o map by bilinear sampling with clamped boundary."""
    warped = _sample(image.data, mapping.data, image.spacing, image.origin)
    return image.with_data(warped)


def map_jacobian_det(mapping: MapField) -> ImageField:
    """|det D(map)| by finite differences of the map components."""
    hx, hy = mapping.spacing
    dxx, dxy = np.gradient(mapping.data[..., 0], hx, hy, edge_order=1)
    dyx, dyy = np.gradient(mapping.data[..., 1], hx, hy, edge_order=1)
    return ImageField(np.abs(dxx * dyy - dxy * dyx), mapping.spacing, mapping.origin)


@dataclass(frozen=True, eq=False)
class ImageProblem:
    """Inexact image matching of source onto target."""

    source: ImageField
    target: ImageField
    lam: float
    kernel: GaussianKernel
    basis: NoiseBasis = field(default_factory=NoiseBasis.empty)
    n_t: int = 10
    noise_fields: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.source.shape != self.target.shape or self.source.spacing != self.target.spacing:
            raise ConfigurationError("source and target images must share the same grid")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if self.n_t < 2:
            raise ConfigurationError(f"n_t must be at least 2, got {self.n_t}")
        source = self.source
        fields = grid_noise_fields(self.basis, source.shape, source.spacing, source.origin)
        fields.setflags(write=False)
        object.__setattr__(self, "noise_fields", fields)

    def draw_path(self, seed: int, refinement: int = 1) -> BrownianPath:
        n_steps = refinement * (self.n_t - 1)
        return brownian_sample(seed, n_steps, self.basis.n_fields, 1.0 / n_steps)


@dataclass
class ImageEvaluation:
    """Warped images, determinants and energy of a velocity string under one noise path."""

    forward: List[ImageField]
    backward: List[ImageField]
    determinants: List[ImageField]
    energy: float
    ssd: float
    force: np.ndarray


def ssd(a: ImageField, b: ImageField) -> float:
    """Sum of squared intensity differences."""
    return float(np.sum((a.data - b.data) ** 2))


def evaluate_image_string(
    us: VelocityString, problem: ImageProblem, path: Optional[BrownianPath]
) -> ImageEvaluation:
    """Warp both images along the string and compute the energy and the raw force."""
    source, target = problem.source, problem.target
    fwd, bwd = integrate_maps(us, problem.noise_fields, path, source.spacing, source.origin)
    forward = [warp_image(source, m) for m in fwd]
    backward = [warp_image(target, m) for m in bwd]
    determinants = [map_jacobian_det(m) for m in bwd]

    scale = 2.0 / problem.lam**2
    force = np.stack(
        [
            scale * (det.data * (j0.data - j1.data))[..., None] * image_gradient(j0).data
            for j0, j1, det in zip(forward, backward, determinants)
        ]
    )

    kinetic = np.sum(us.m * us.u, axis=(1, 2, 3))
    mismatch = ssd(forward[-1], target)
    kinetic_energy = 0.5 * float(trapezoid(kinetic, dx=1.0 / (us.n_t - 1)))
    energy = kinetic_energy + mismatch / (2.0 * problem.lam**2)
    return ImageEvaluation(forward, backward, determinants, energy, mismatch, force)


def _update(us: VelocityString, force: np.ndarray, kernel: GaussianKernel, spacing, epsilon: float):
    """Momentum step m <- m + epsilon (-2m + force), u = K m; returns |K(-2m + force)|_max."""
    direction = -2.0 * us.m + force
    m = us.m + epsilon * direction
    u = smooth(m, kernel, spacing)
    _check_finite(u, "velocity field")
    residual = float(np.max(np.linalg.norm(smooth(direction, kernel, spacing), axis=-1)))
    return VelocityString(u, m), residual


def image_string_step(
    us: VelocityString,
    I0: ImageField,
    I1: ImageField,
    lam: float,
    kernel: GaussianKernel,
    basis: NoiseBasis,
    path: Optional[BrownianPath],
    epsilon: float,
) -> VelocityString:
    """
    One image string update u(t_k) <- u(t_k) + epsilon * (-2 u(t_k) + K force(t_k)).

    force = (2 / lambda^2) |det D g_{t,1}^{-1}| (J_t^0 - J_t^1) grad J_t^0.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    problem = ImageProblem(I0, I1, lam, kernel, basis, us.n_t)
    evaluation = evaluate_image_string(us, problem, path)
    updated, _ = _update(us, evaluation.force, kernel, I0.spacing, epsilon)
    return updated


@dataclass
class ImageTrace:
    """Iterates of one image string."""

    member: int
    velocities: VelocityString
    energies: List[float]
    ssd: List[float]
    residuals: List[float]
    mean_ssd: List[float]
    evaluation: ImageEvaluation
    converged: bool


@dataclass
class ImageRun:
    """Result of run_image_matching."""

    traces: List[ImageTrace]
    temperature: str

    @property
    def velocities(self) -> VelocityString:
        return self.traces[0].velocities

    @property
    def energies(self) -> List[float]:
        return self.traces[0].energies

    @property
    def ssd(self) -> List[float]:
        return self.traces[0].ssd

    @property
    def converged(self) -> bool:
        return all(trace.converged for trace in self.traces)

    @property
    def warped(self) -> ImageField:
        """g_1 . I_0 of the final string."""
        return self.traces[0].evaluation.forward[-1]

    def snapshots(self, times: Sequence[float] = (0.0, 0.24, 0.49, 0.75, 1.0)) -> List[ImageField]:
        """g_t . I_0 at the grid times closest to the requested ones."""
        forward = self.traces[0].evaluation.forward
        n_t = len(forward)
        return [forward[int(round(t * (n_t - 1)))] for t in times]


def _image_member(problem: ImageProblem, cfg: OptimizerConfig, member: int) -> ImageTrace:
    source = problem.source
    us = VelocityString.zeros(problem.n_t, source.shape)
    finite = cfg.temperature == "finite"
    path: Optional[BrownianPath] = None
    if not finite:
        path = problem.draw_path(derive_seed(cfg.seed, member), cfg.brownian_refinement)

    energies: List[float] = []
    ssds: List[float] = []
    residuals: List[float] = []
    mean_ssd: List[float] = []
    endpoints: deque = deque(maxlen=cfg.window)
    converged = False

    for k in range(cfg.n_s):
        if finite:
            path = problem.draw_path(derive_seed(cfg.seed, member, k), cfg.brownian_refinement)
        evaluation = evaluate_image_string(us, problem, path)
        updated, residual = _update(
            us, evaluation.force, problem.kernel, source.spacing, cfg.epsilon
        )
        energies.append(evaluation.energy)
        ssds.append(evaluation.ssd)
        residuals.append(residual)
        logger.debug(
            "image member %d iteration %d: E=%.6g SSD=%.6g residual=%.3g",
            member,
            k,
            evaluation.energy,
            evaluation.ssd,
            residual,
        )
        if finite:
            endpoints.append(evaluation.forward[-1].data)
            mean_ssd.append(float(np.sum((np.mean(endpoints, axis=0) - problem.target.data) ** 2)))
        elif residual < cfg.tol or residual == 0.0:
            converged = True
            break
        us = updated

    evaluation = evaluate_image_string(us, problem, path)
    if not finite and not converged:
        logger.warning("image member %d did not converge in %d iterations", member, cfg.n_s)
    return ImageTrace(member, us, energies, ssds, residuals, mean_ssd, evaluation, converged)


def run_image_matching(
    I0: ImageField,
    I1: ImageField,
    lam: float,
    kernel: GaussianKernel,
    basis: NoiseBasis,
    cfg: OptimizerConfig,
    n_t: int = 10,
    workers: Optional[int] = None,
) -> ImageRun:
    """
    Zero- or finite-temperature image string iteration from u == 0.

    Args:
        I0: Source image
        I1: Target image on the same grid
        lam: Inexactness weight lambda
        kernel: Gaussian Green's kernel K
        basis: Noise fields, normalized to uniform amplitude on the grid
        cfg: Optimizer parameters
        n_t: Points of the t-grid
        workers: Worker threads for the ensemble (defaults to settings)

    Returns:
        ImageRun with per-iteration energy, SSD and residual per member
    """
    problem = ImageProblem(I0, I1, lam, kernel, basis, n_t)
    logger.info(
        "Image matching: %dx%d grid, J=%d, n_t=%d, %s temperature, M=%d",
        I0.shape[0],
        I0.shape[1],
        basis.n_fields,
        n_t,
        cfg.temperature,
        cfg.ensemble_size,
    )
    workers = workers or get_settings().workers
    members = range(cfg.ensemble_size)
    if workers <= 1 or cfg.ensemble_size == 1:
        traces = [_image_member(problem, cfg, j) for j in members]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, cfg.ensemble_size)) as executor:
            traces = list(executor.map(lambda j: _image_member(problem, cfg, j), members))
    run = ImageRun(traces, cfg.temperature)
    logger.info("Image matching finished: SSD %.6g -> %.6g", run.ssd[0], ssd(run.warped, I1))
    return run
