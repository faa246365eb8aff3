"""
Landmark Dynamics Module

Stochastically perturbed landmark flows on a uniform time grid t_k = k / (n_t - 1):
the reconstruction flow driven by a momentum string, backward transport of the
flow Jacobian, the stochastic Hamiltonian system used as a generative sampler,
and the energy and gradient of inexact matching.

Stratonovich integrals are realized by the stochastic Heun predictor-corrector.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from .errors import ConfigurationError, DegenerateJacobianError, IntegrationError
from .kernels import BrownianPath, Kernel, NoiseBasis

logger = logging.getLogger(__name__)

# Smallest |det| accepted when inverting a transported Jacobian
DET_GUARD = 1e-12


@dataclass(frozen=True, eq=False)
class LandmarkConfig:
    """N landmark positions in the plane, shape (N, 2)."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ConfigurationError(f"landmarks must have shape (N, 2), got {points.shape}")
        if points.shape[0] < 1:
            raise ConfigurationError("a landmark configuration needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ConfigurationError("landmark coordinates must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    def translated(self, shift) -> "LandmarkConfig":
        return LandmarkConfig(self.points + np.asarray(shift, dtype=float))


Points = Union[LandmarkConfig, np.ndarray]


def as_points(q: Points) -> np.ndarray:
    """Coordinates of a configuration or array as a float array."""
    if isinstance(q, LandmarkConfig):
        return q.points
    return np.asarray(q, dtype=float)


def time_grid(n_t: int) -> np.ndarray:
    """Uniform grid on [0, 1] with n_t points."""
    if n_t < 2:
        raise ConfigurationError(f"n_t must be at least 2, got {n_t}")
    return np.linspace(0.0, 1.0, n_t)


def zero_momentum(n_t: int, n: int) -> np.ndarray:
    """Momentum string p == 0 of shape (n_t, N, 2)."""
    return np.zeros((n_t, n, 2))


def resolve_path(path: Optional[BrownianPath], n_t: int, n_fields: int) -> BrownianPath:
    """
    Bring a Brownian path onto the n_t - 1 intervals of the unit t-grid.

    A missing path means zero increments. Finer paths are aggregated.

    Raises:
        ConfigurationError: If the path does not span unit time or has the wrong width
    """
    n_intervals = n_t - 1
    if path is None:
        return BrownianPath.zeros(n_intervals, n_fields, 1.0 / n_intervals)
    if path.n_fields != n_fields:
        raise ConfigurationError(
            f"Brownian path has {path.n_fields} channels but the basis has {n_fields} fields"
        )
    if not np.isclose(path.horizon, 1.0, rtol=1e-9):
        raise ConfigurationError(f"Brownian path spans {path.horizon}, expected unit time")
    return path.aggregate(n_intervals)


def _check_finite(array: np.ndarray, what: str, step: int):
    if not np.all(np.isfinite(array)):
        raise IntegrationError(
            f"non-finite {what} at step {step}; reduce the time step or the momentum scale"
        )


def kernel_matrix(q: np.ndarray, kernel: Kernel) -> np.ndarray:
    """K[..., i, j] = K(q_i - q_j)."""
    return kernel.evaluate(q[..., :, None, :] - q[..., None, :, :])


def kernel_gradients(q: np.ndarray, kernel: Kernel) -> np.ndarray:
    """dK[..., i, j, :] = grad K(q_i - q_j)."""
    return kernel.gradient(q[..., :, None, :] - q[..., None, :, :])


def drift(q: np.ndarray, p: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Landmark velocities u(q_i) = sum_j K(q_i - q_j) p_j."""
    return np.einsum("...ij,...jd->...id", kernel_matrix(q, kernel), p)


def noise_displacement(q: np.ndarray, basis: NoiseBasis, dw: np.ndarray) -> np.ndarray:
    """sum_l sigma_l(q) dW_l at every point; dw broadcasts over leading axes of q."""
    if basis.n_fields == 0:
        return np.zeros_like(q)
    sigma = basis.evaluate(q)
    return np.einsum("...njd,...j->...nd", sigma, dw)


def velocity_field(q: Points, p: np.ndarray, kernel: Kernel, x: np.ndarray) -> np.ndarray:
    """
    Evaluate u(x) = sum_i K(x - q_i) p_i.

    Args:
        q: Landmark positions (N, 2)
        p: Momenta (N, 2)
        kernel: Green's kernel K
        x: Evaluation point(s), shape (..., 2)

    Returns:
        Velocities with the shape of x
    """
    q = as_points(q)
    p = np.asarray(p, dtype=float)
    if p.shape != q.shape:
        raise ConfigurationError(f"momentum shape {p.shape} does not match landmarks {q.shape}")
    x = np.asarray(x, dtype=float)
    weights = kernel.evaluate(x[..., None, :] - q)
    return np.einsum("...i,id->...d", weights, p)


def flow_forward(
    q0: Points,
    p: np.ndarray,
    basis: NoiseBasis,
    path: Optional[BrownianPath],
    kernel: Kernel,
) -> np.ndarray:
    """
    Integrate dq_i = u_t(q_i) dt + sum_l sigma_l(q_i) o dW^l with stochastic Heun.

    Args:
        q0: Initial configuration (N, 2)
        p: Momentum string (n_t, N, 2)
        basis: Noise fields
        path: Brownian increments over unit time (None for no noise)
        kernel: Green's kernel K

    Returns:
        Trajectory q of shape (n_t, N, 2) with q[0] = q0

    Raises:
        IntegrationError: If the state becomes non-finite
    """
    q0 = as_points(q0)
    p = np.asarray(p, dtype=float)
    n_t = p.shape[0]
    if p.shape[1:] != q0.shape:
        raise ConfigurationError(f"momentum string shape {p.shape} does not match {q0.shape}")
    path = resolve_path(path, n_t, basis.n_fields)
    dt = path.dt

    q = np.empty_like(p)
    q[0] = q0
    for k in range(n_t - 1):
        dw = path.increments[k]
        f0 = drift(q[k], p[k], kernel)
        s0 = noise_displacement(q[k], basis, dw)
        predicted = q[k] + f0 * dt + s0
        f1 = drift(predicted, p[k + 1], kernel)
        s1 = noise_displacement(predicted, basis, dw)
        q[k + 1] = q[k] + 0.5 * (f0 + f1) * dt + 0.5 * (s0 + s1)
        _check_finite(q[k + 1], "landmark position", k + 1)
    return q


def advect_points(
    x0: np.ndarray,
    q: np.ndarray,
    p: np.ndarray,
    basis: NoiseBasis,
    path: Optional[BrownianPath],
    kernel: Kernel,
) -> np.ndarray:
    """
    Carry tracer points through the flow generated by a landmark string.

    The velocity field is u_t(x) = sum_i K(x - q_i(t)) p_i(t) with q the stored
    landmark trajectory; tracers do not act back on the landmarks.

    Args:
        x0: Tracer positions (M, 2)
        q: Landmark trajectory (n_t, N, 2)
        p: Momentum string (n_t, N, 2)
        basis: Noise fields
        path: Brownian increments (same realization as the landmark flow)
        kernel: Green's kernel K

    Returns:
        Tracer trajectories of shape (n_t, M, 2)
    """
    x0 = np.asarray(x0, dtype=float)
    n_t = q.shape[0]
    path = resolve_path(path, n_t, basis.n_fields)
    dt = path.dt

    x = np.empty((n_t,) + x0.shape)
    x[0] = x0
    for k in range(n_t - 1):
        dw = path.increments[k]
        f0 = velocity_field(q[k], p[k], kernel, x[k])
        s0 = noise_displacement(x[k], basis, dw)
        predicted = x[k] + f0 * dt + s0
        f1 = velocity_field(q[k + 1], p[k + 1], kernel, predicted)
        s1 = noise_displacement(predicted, basis, dw)
        x[k + 1] = x[k] + 0.5 * (f0 + f1) * dt + 0.5 * (s0 + s1)
        _check_finite(x[k + 1], "tracer position", k + 1)
    return x


def _velocity_jacobians(q: np.ndarray, p: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Du[..., n, alpha, gamma] = sum_i p_i^alpha d_gamma K(q_n - q_i)."""
    return np.einsum("...nig,...ia->...nag", kernel_gradients(q, kernel), p)


def jacobian_backward(
    trajectory: np.ndarray,
    p: np.ndarray,
    basis: NoiseBasis,
    path: Optional[BrownianPath],
    kernel: Kernel,
) -> np.ndarray:
    """
    Transport the flow Jacobian from t = 1 back along the stored trajectory.

    Integrates dA = (Du_t dt + sum_l D sigma_l o dW^l) A in reversed time with
    Heun steps, starting from the identity at t = 1 and reusing the forward
    trajectory and the same Brownian increments.

    Returns:
        jac of shape (n_t, N, 2, 2) with jac[n_t - 1] equal to the identity
    """
    q = np.asarray(trajectory, dtype=float)
    p = np.asarray(p, dtype=float)
    n_t, n = q.shape[:2]
    path = resolve_path(path, n_t, basis.n_fields)
    dt = path.dt

    du = _velocity_jacobians(q, p, kernel) * dt
    if basis.n_fields:
        dsigma = basis.jacobian(q)
        dw = path.increments
        lower = du[:-1] + np.einsum("knjag,kj->knag", dsigma[:-1], dw)
        upper = du[1:] + np.einsum("knjag,kj->knag", dsigma[1:], dw)
    else:
        lower = du[:-1]
        upper = du[1:]

    jac = np.empty((n_t, n, 2, 2))
    jac[-1] = np.eye(2)
    for k in range(n_t - 2, -1, -1):
        a_next = jac[k + 1]
        step_upper = upper[k] @ a_next
        predicted = a_next - step_upper
        jac[k] = a_next - 0.5 * (step_upper + lower[k] @ predicted)
        _check_finite(jac[k], "Jacobian", k)
    return jac


def hamiltonian_batch(
    q0: np.ndarray,
    p0: np.ndarray,
    basis: NoiseBasis,
    increments: np.ndarray,
    dt: float,
    kernel: Kernel,
    keep_trajectory: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stochastic Hamiltonian flow for a batch of independent systems.

    Args:
        q0: Initial positions (B, N, 2)
        p0: Initial momenta (B, N, 2)
        basis: Noise fields
        increments: Brownian increments (n_steps, B, J)
        dt: Time step
        kernel: Green's kernel K
        keep_trajectory: Return every step instead of the end point

    Returns:
        Tuple (q, p): end states (B, N, 2), or trajectories (n_steps + 1, B, N, 2)
    """

    def vector_field(q, p, dw):
        dk = kernel_gradients(q, kernel)
        pp = np.einsum("...id,...jd->...ij", p, p)
        dq = drift(q, p, kernel) * dt + noise_displacement(q, basis, dw)
        dp = -np.einsum("...ij,...ijg->...ig", pp, dk) * dt
        if basis.n_fields:
            jac = np.einsum("...njag,...j->...nag", basis.jacobian(q), dw)
            dp = dp - np.einsum("...nag,...na->...ng", jac, p)
        return dq, dp

    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    n_steps = increments.shape[0]
    if keep_trajectory:
        qs = np.empty((n_steps + 1,) + q.shape)
        ps = np.empty((n_steps + 1,) + p.shape)
        qs[0], ps[0] = q, p

    for k in range(n_steps):
        dw = increments[k]
        dq0, dp0 = vector_field(q, p, dw)
        dq1, dp1 = vector_field(q + dq0, p + dp0, dw)
        q = q + 0.5 * (dq0 + dq1)
        p = p + 0.5 * (dp0 + dp1)
        _check_finite(q, "Hamiltonian position", k + 1)
        _check_finite(p, "Hamiltonian momentum", k + 1)
        if keep_trajectory:
            qs[k + 1], ps[k + 1] = q, p

    if keep_trajectory:
        return qs, ps
    return q, p


def hamiltonian_flow(
    q0: Points,
    p0: np.ndarray,
    basis: NoiseBasis,
    path: BrownianPath,
    kernel: Kernel,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate the stochastic Hamiltonian landmark system with stochastic Heun.

        dq_i = sum_j K(q_i - q_j) p_j dt + sum_l sigma_l(q_i) o dW^l
        dp_i = -sum_j (p_i . p_j) grad K(q_i - q_j) dt - sum_l (D sigma_l(q_i))^T p_i o dW^l

    Args:
        q0: Initial configuration (N, 2)
        p0: Initial momenta (N, 2)
        basis: Noise fields
        path: Brownian increments; its step count and dt define the time grid
        kernel: Green's kernel K

    Returns:
        Tuple (q, p) of trajectories with shape (n_steps + 1, N, 2)
    """
    q0 = as_points(q0)
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != q0.shape:
        raise ConfigurationError(f"momentum shape {p0.shape} does not match {q0.shape}")
    if path.n_fields != basis.n_fields:
        raise ConfigurationError(
            f"Brownian path has {path.n_fields} channels but the basis has {basis.n_fields} fields"
        )
    qs, ps = hamiltonian_batch(
        q0[None],
        p0[None],
        basis,
        path.increments[:, None, :],
        path.dt,
        kernel,
        keep_trajectory=True,
    )
    return qs[:, 0], ps[:, 0]


def lagrangian_value(q: np.ndarray, p: np.ndarray, kernel: Kernel) -> np.ndarray:
    """l = sum_ij p_i . p_j K(q_i - q_j); batched over leading axes."""
    q = as_points(q)
    p = np.asarray(p, dtype=float)
    return np.sum(p * drift(q, p, kernel), axis=(-2, -1))


def hamiltonian(q: np.ndarray, p: np.ndarray, kernel: Kernel) -> np.ndarray:
    """H = l / 2, conserved by the noise-free Hamiltonian flow."""
    return 0.5 * lagrangian_value(q, p, kernel)


@dataclass(frozen=True, eq=False)
class StringState:
    """
    One discretized string and everything derived from it.

    Attributes:
        q0: Source configuration
        p: Momentum string (n_t, N, 2)
        q: Trajectory (n_t, N, 2)
        jac: Backward Jacobians Dg_{t_k,1} at q_i(1), shape (n_t, N, 2, 2)
        energy: Matching energy of the string
        kernel: Green's kernel K
        basis: Noise fields
        path: Brownian increments the trajectory was computed with
    """

    q0: LandmarkConfig
    p: np.ndarray
    q: np.ndarray
    jac: np.ndarray
    energy: float
    kernel: Kernel
    basis: NoiseBasis
    path: BrownianPath

    @property
    def n_t(self) -> int:
        return int(self.p.shape[0])

    @property
    def endpoint(self) -> np.ndarray:
        return self.q[-1]


def _kinetic_energy(q: np.ndarray, p: np.ndarray, kernel: Kernel) -> float:
    n_t = q.shape[0]
    return 0.5 * float(trapezoid(lagrangian_value(q, p, kernel), dx=1.0 / (n_t - 1)))


def _mismatch(endpoint: np.ndarray, target: np.ndarray, lam: float) -> float:
    return float(np.sum((endpoint - target) ** 2)) / (2.0 * lam**2)


def _check_lambda(lam: float):
    if not lam > 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")


def evaluate_string(
    q0: Points,
    p: np.ndarray,
    basis: NoiseBasis,
    path: Optional[BrownianPath],
    kernel: Kernel,
    target: Points,
    lam: float,
) -> StringState:
    """Flow, Jacobians and energy of a momentum string under one noise realization."""
    _check_lambda(lam)
    source = q0 if isinstance(q0, LandmarkConfig) else LandmarkConfig(q0)
    p = np.array(p, dtype=float)
    n_t = p.shape[0]
    path = resolve_path(path, n_t, basis.n_fields)
    q = flow_forward(source, p, basis, path, kernel)
    jac = jacobian_backward(q, p, basis, path, kernel)
    energy = _kinetic_energy(q, p, kernel) + _mismatch(q[-1], as_points(target), lam)
    p.setflags(write=False)
    return StringState(source, p, q, jac, energy, kernel, basis, path)


def matching_energy(state: StringState, target: Points, lam: float) -> float:
    """
    E = 1/2 * trapz_t(l(u_t)) + |q(1) - y|^2 / (2 lambda^2).

    Raises:
        ConfigurationError: If lambda is not positive
    """
    _check_lambda(lam)
    target = as_points(target)
    if target.shape != state.q0.points.shape:
        raise ConfigurationError(f"target shape {target.shape} does not match the source")
    return _kinetic_energy(state.q, state.p, state.kernel) + _mismatch(state.q[-1], target, lam)


def inverse_transpose(jac: np.ndarray) -> np.ndarray:
    """
    Closed-form inverse transpose of 2x2 matrices.

    Raises:
        DegenerateJacobianError: If any |det| < 1e-12
    """
    a, b = jac[..., 0, 0], jac[..., 0, 1]
    c, d = jac[..., 1, 0], jac[..., 1, 1]
    det = a * d - b * c
    bad = np.abs(det) < DET_GUARD
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DegenerateJacobianError(f"Jacobian determinant below {DET_GUARD} at index {index}")
    out = np.empty_like(jac)
    out[..., 0, 0] = d / det
    out[..., 0, 1] = -c / det
    out[..., 1, 0] = -b / det
    out[..., 1, 1] = a / det
    return out


def string_gradient(state: StringState, target: Points, lam: float) -> np.ndarray:
    """
    g_i(t_k) = p_i(t_k) + (1 / lambda^2) (Dg_{t_k,1})^{-T} (q_i(1) - y_i).

    The string update is p <- p - epsilon * g.

    Raises:
        ConfigurationError: If lambda is not positive
        DegenerateJacobianError: If a transported Jacobian is singular
    """
    _check_lambda(lam)
    residual = state.q[-1] - as_points(target)
    transport = inverse_transpose(state.jac)
    return state.p + np.einsum("knab,nb->kna", transport, residual) / lam**2


def momentum_residual(state: StringState, target: Points, lam: float) -> float:
    """Largest landmark norm of the string gradient over the t-grid."""
    gradient = string_gradient(state, target, lam)
    return float(np.max(np.linalg.norm(gradient, axis=-1)))
