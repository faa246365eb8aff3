"""
Kernel Module

Radial kernels used both as the Green's function K of the deformation metric
and as the spatial profiles k_r of the noise fields, the noise-field basis
sigma_l(x) = a_l * k_{r_l}(|x - delta_l|), and seeded Brownian increments.

All types are immutable after construction and every operation is a pure
function of its inputs.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError
from .models import NoiseBasisDocument, NoiseEntry

logger = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
BSPLINE = "bspline"
KERNEL_KINDS = (GAUSSIAN, BSPLINE)

# Value of the centered cubic B-spline at the origin (uniform B-spline convention)
BSPLINE_PEAK = 2.0 / 3.0


def _check_scale(r: float) -> float:
    r = float(r)
    if not np.isfinite(r) or r <= 0:
        raise ConfigurationError(f"kernel scale must be positive, got {r}")
    return r


def _gaussian_profile(d: np.ndarray, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Values and gradients of exp(-|d|^2 / (2 r^2)); r broadcasts against d[..., 0]."""
    d2 = np.sum(d * d, axis=-1)
    r2 = r * r
    values = np.exp(-d2 / (2.0 * r2))
    grads = -(d / r2[..., None] if np.ndim(r2) else d / r2) * values[..., None]
    return values, grads


def _bspline_profile(d: np.ndarray, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Values and gradients of b3(|d| / r), support |d| < 2r."""
    dist = np.sqrt(np.sum(d * d, axis=-1))
    s = dist / r
    inner = s < 1.0
    outer = (s >= 1.0) & (s < 2.0)

    values = np.zeros_like(s)
    values = np.where(inner, BSPLINE_PEAK - s**2 + 0.5 * s**3, values)
    values = np.where(outer, (2.0 - s) ** 3 / 6.0, values)

    # d b3(s)/dx = b3'(s) / s * x / r^2; the ratio b3'(s)/s is finite at s = 0
    safe_s = np.where(s > 0, s, 1.0)
    ratio = np.zeros_like(s)
    ratio = np.where(inner, -2.0 + 1.5 * s, ratio)
    ratio = np.where(outer, -((2.0 - s) ** 2) / (2.0 * safe_s), ratio)
    r2 = r * r
    scale = ratio / r2
    grads = d * scale[..., None]
    return values, grads


@dataclass(frozen=True)
class GaussianKernel:
    """Gaussian kernel k_r(x) = exp(-|x|^2 / (2 r^2)) with k_r(0) = 1."""

    r: float
    kind: str = field(default=GAUSSIAN, init=False)

    def __post_init__(self):
        object.__setattr__(self, "r", _check_scale(self.r))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points x of shape (..., 2)."""
        values, _ = _gaussian_profile(np.asarray(x, dtype=float), np.float64(self.r))
        return values

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient -(x / r^2) k_r(x), shape (..., 2)."""
        _, grads = _gaussian_profile(np.asarray(x, dtype=float), np.float64(self.r))
        return grads


@dataclass(frozen=True)
class BSplineKernel:
    """Centered cubic B-spline b3(|x| / r) with b3(0) = 2/3 and support |x| < 2r."""

    r: float
    kind: str = field(default=BSPLINE, init=False)

    def __post_init__(self):
        object.__setattr__(self, "r", _check_scale(self.r))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points x of shape (..., 2)."""
        values, _ = _bspline_profile(np.asarray(x, dtype=float), np.float64(self.r))
        return values

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the B-spline profile, shape (..., 2)."""
        _, grads = _bspline_profile(np.asarray(x, dtype=float), np.float64(self.r))
        return grads


Kernel = Union[GaussianKernel, BSplineKernel]


def make_kernel(kind: str, r: float) -> Kernel:
    """Construct a kernel by kind name."""
    if kind == GAUSSIAN:
        return GaussianKernel(r)
    if kind == BSPLINE:
        return BSplineKernel(r)
    raise ConfigurationError(f"unknown kernel kind '{kind}' (expected one of {KERNEL_KINDS})")


def kernel_eval(kernel: Kernel, x: np.ndarray) -> np.ndarray:
    """Evaluate k_r(|x|)."""
    return kernel.evaluate(x)


def kernel_grad(kernel: Kernel, x: np.ndarray) -> np.ndarray:
    """Gradient of k_r(|x|) with respect to x."""
    return kernel.gradient(x)


@dataclass(frozen=True, eq=False)
class NoiseBasis:
    """
    J spatial noise fields sigma_l(x) = a_l * k_{r_l}(|x - delta_l|).

    Attributes:
        centers: Field centers delta_l, shape (J, 2)
        amplitudes: Vector amplitudes a_l, shape (J, 2)
        scales: Length scales r_l, shape (J,)
        kinds: Kernel kind per field
    """

    centers: np.ndarray
    amplitudes: np.ndarray
    scales: np.ndarray
    kinds: Tuple[str, ...]

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1, 2)
        scales = np.asarray(self.scales, dtype=float).reshape(-1)
        kinds = tuple(self.kinds)

        n_fields = centers.shape[0]
        if amplitudes.shape[0] != n_fields or scales.shape[0] != n_fields or len(kinds) != n_fields:
            raise ConfigurationError(
                "noise basis arrays disagree: "
                f"{n_fields} centers, {amplitudes.shape[0]} amplitudes, "
                f"{scales.shape[0]} scales, {len(kinds)} kinds"
            )
        if n_fields and (not np.all(np.isfinite(scales)) or np.any(scales <= 0)):
            raise ConfigurationError("noise scales must be positive")
        if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(amplitudes))):
            raise ConfigurationError("noise centers and amplitudes must be finite")
        unknown = sorted(set(kinds) - set(KERNEL_KINDS))
        if unknown:
            raise ConfigurationError(f"unknown noise kernel kinds: {', '.join(unknown)}")

        for array in (centers, amplitudes, scales):
            array.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "amplitudes", amplitudes)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def empty(cls) -> "NoiseBasis":
        """The basis with no fields (deterministic flows)."""
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), ())

    @property
    def n_fields(self) -> int:
        return int(self.centers.shape[0])

    def profiles(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Kernel values (..., J) and gradients (..., J, 2) at points x (..., 2)."""
        x = np.asarray(x, dtype=float)
        d = x[..., None, :] - self.centers
        gaussian = np.array([kind == GAUSSIAN for kind in self.kinds], dtype=bool)

        values = np.zeros(d.shape[:-1])
        grads = np.zeros(d.shape)
        if gaussian.any():
            v, g = _gaussian_profile(d[..., gaussian, :], self.scales[gaussian])
            values[..., gaussian] = v
            grads[..., gaussian, :] = g
        if (~gaussian).any():
            v, g = _bspline_profile(d[..., ~gaussian, :], self.scales[~gaussian])
            values[..., ~gaussian] = v
            grads[..., ~gaussian, :] = g
        return values, grads

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Field values sigma_l(x), shape (..., J, 2)."""
        values, _ = self.profiles(x)
        return values[..., None] * self.amplitudes

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Field Jacobians D sigma_l(x)[alpha, gamma] = a_l^alpha d_gamma k, (..., J, 2, 2)."""
        _, grads = self.profiles(x)
        return self.amplitudes[:, :, None] * grads[..., None, :]

    def scaled(self, factor: float) -> "NoiseBasis":
        """Basis with every amplitude multiplied by factor."""
        return NoiseBasis(self.centers, self.amplitudes * float(factor), self.scales, self.kinds)

    def with_scale(self, r: float) -> "NoiseBasis":
        """Basis with every length scale set to r."""
        r = _check_scale(r)
        return NoiseBasis(self.centers, self.amplitudes, np.full(self.n_fields, r), self.kinds)

    def translated(self, shift: Sequence[float]) -> "NoiseBasis":
        """Basis with every center moved by shift."""
        return NoiseBasis(
            self.centers + np.asarray(shift, dtype=float), self.amplitudes, self.scales, self.kinds
        )

    def to_document(self) -> NoiseBasisDocument:
        """JSON document form of the basis."""
        entries = [
            NoiseEntry(
                center=[float(c) for c in self.centers[l]],
                amplitude=[float(a) for a in self.amplitudes[l]],
                scale=float(self.scales[l]),
                kind=self.kinds[l],
            )
            for l in range(self.n_fields)
        ]
        return NoiseBasisDocument(entries=entries)

    @classmethod
    def from_document(cls, document: NoiseBasisDocument) -> "NoiseBasis":
        """Build a basis from its JSON document form."""
        if not document.entries:
            return cls.empty()
        return cls(
            centers=np.array([entry.center for entry in document.entries]),
            amplitudes=np.array([entry.amplitude for entry in document.entries]),
            scales=np.array([entry.scale for entry in document.entries]),
            kinds=tuple(entry.kind for entry in document.entries),
        )


def noise_eval(basis: NoiseBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate sigma_l(x) for every field; shape (..., J, 2)."""
    return basis.evaluate(x)


def noise_jacobian(basis: NoiseBasis, x: np.ndarray) -> np.ndarray:
    """Evaluate D sigma_l(x) for every field; shape (..., J, 2, 2)."""
    return basis.jacobian(x)


def make_grid_basis(
    bbox: Sequence[float],
    n_per_axis: int,
    scale: float,
    amplitude: Union[float, Sequence[float]],
    kind: str = GAUSSIAN,
    split_axes: bool = False,
) -> NoiseBasis:
    """
    Place noise fields on a regular grid of cell centers over a rectangle.

    Args:
        bbox: Rectangle (x_min, y_min, x_max, y_max)
        n_per_axis: Number of centers along each axis
        scale: Shared length scale r
        amplitude: Shared amplitude vector (a scalar means (a, a))
        kind: Kernel kind of every field
        split_axes: Place two fields per center, directed along x and y

    Returns:
        NoiseBasis with n_per_axis^2 fields (twice that with split_axes)

    Raises:
        ConfigurationError: If the grid, scale or rectangle is invalid
    """
    if n_per_axis < 1:
        raise ConfigurationError(f"n_per_axis must be at least 1, got {n_per_axis}")
    scale = _check_scale(scale)
    if kind not in KERNEL_KINDS:
        raise ConfigurationError(f"unknown noise kernel kind '{kind}'")
    x_min, y_min, x_max, y_max = (float(v) for v in bbox)
    if not (x_max > x_min and y_max > y_min):
        raise ConfigurationError(f"degenerate bounding box {tuple(bbox)}")

    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), (2,))
    xs = x_min + (np.arange(n_per_axis) + 0.5) * (x_max - x_min) / n_per_axis
    ys = y_min + (np.arange(n_per_axis) + 0.5) * (y_max - y_min) / n_per_axis
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=-1)

    if split_axes:
        centers = np.repeat(centers, 2, axis=0)
        amplitudes = np.tile(np.array([[amp[0], 0.0], [0.0, amp[1]]]), (n_per_axis**2, 1))
    else:
        amplitudes = np.tile(amp, (centers.shape[0], 1))

    basis = NoiseBasis(
        centers=centers,
        amplitudes=amplitudes,
        scales=np.full(centers.shape[0], scale),
        kinds=(kind,) * centers.shape[0],
    )
    logger.debug("Built %d %s noise fields over %s", basis.n_fields, kind, tuple(bbox))
    return basis


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """
    Wiener increments over a uniform time grid.

    Attributes:
        increments: Array (n_steps, J); row k holds W(t_{k+1}) - W(t_k)
        dt: Step length of one increment
        seed: Seed the increments were drawn from
    """

    increments: np.ndarray
    dt: float
    seed: int = 0

    def __post_init__(self):
        increments = np.asarray(self.increments, dtype=float)
        if increments.ndim != 2:
            raise ConfigurationError(f"increments must be 2-D, got shape {increments.shape}")
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        increments.setflags(write=False)
        object.__setattr__(self, "increments", increments)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def n_fields(self) -> int:
        return int(self.increments.shape[1])

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def aggregate(self, n_intervals: int) -> "BrownianPath":
        """
        Sum consecutive increments so the path has n_intervals steps.

        Raises:
            ConfigurationError: If n_steps is not a multiple of n_intervals
        """
        if n_intervals == self.n_steps:
            return self
        if n_intervals < 1 or self.n_steps % n_intervals:
            raise ConfigurationError(
                f"cannot aggregate {self.n_steps} increments into {n_intervals} intervals"
            )
        factor = self.n_steps // n_intervals
        summed = self.increments.reshape(n_intervals, factor, self.n_fields).sum(axis=1)
        return BrownianPath(summed, self.dt * factor, self.seed)

    @classmethod
    def zeros(cls, n_steps: int, n_fields: int, dt: float) -> "BrownianPath":
        """A path whose increments all vanish."""
        return cls(np.zeros((n_steps, n_fields)), dt, 0)


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit sub-seed for the stream identified by keys."""
    sequence = np.random.SeedSequence(_check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, np.uint64)[0])


def brownian_sample(seed: int, n_t: int, n_fields: int, dt: float) -> BrownianPath:
    """
    Draw i.i.d. Normal(0, dt) increments with PCG64 and ziggurat normals.

    Args:
        seed: 64-bit seed
        n_t: Number of increments (time steps)
        n_fields: Number of noise fields J
        dt: Time step

    Returns:
        BrownianPath with increments of shape (n_t, n_fields)
    """
    if n_t < 1:
        raise ConfigurationError(f"n_t must be at least 1, got {n_t}")
    if n_fields < 0:
        raise ConfigurationError(f"n_fields must be non-negative, got {n_fields}")
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    seed = _check_seed(seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    increments = rng.standard_normal((n_t, n_fields)) * np.sqrt(dt)
    return BrownianPath(increments, dt, seed)


def brownian_batch(seed: int, n_paths: int, n_t: int, n_fields: int, dt: float) -> np.ndarray:
    """
    Increments for many independent paths at once, shape (n_t, n_paths, n_fields).

    Drawn from a single generator so the batch is a pure function of its arguments.
    """
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be at least 1, got {n_paths}")
    if n_t < 1 or not dt > 0 or n_fields < 0:
        raise ConfigurationError("invalid batch shape or step")
    rng = np.random.Generator(np.random.PCG64(_check_seed(seed)))
    return rng.standard_normal((n_t, n_paths, n_fields)) * np.sqrt(dt)


def basis_summary(basis: NoiseBasis) -> Dict[str, object]:
    """Small description of a basis for manifests and logs."""
    return {
        "n_fields": basis.n_fields,
        "kinds": sorted(set(basis.kinds)),
        "max_amplitude": float(np.max(np.abs(basis.amplitudes))) if basis.n_fields else 0.0,
        "scales": sorted({float(s) for s in basis.scales}),
    }

