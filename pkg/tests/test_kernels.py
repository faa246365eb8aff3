"""
Tests for the kernels module.
"""

import numpy as np
import pytest

from stochmatch.errors import ConfigurationError
from stochmatch.kernels import (
    BSPLINE_PEAK,
    BrownianPath,
    BSplineKernel,
    GaussianKernel,
    NoiseBasis,
    basis_summary,
    brownian_batch,
    brownian_sample,
    derive_seed,
    kernel_eval,
    kernel_grad,
    make_grid_basis,
    make_kernel,
    noise_eval,
    noise_jacobian,
)


def central_difference(fn, x, h=1e-6):
    """Jacobian of fn at x by central differences; columns index the coordinate."""
    columns = []
    for d in range(x.shape[-1]):
        step = np.zeros_like(x)
        step[..., d] = h
        columns.append((fn(x + step) - fn(x - step)) / (2 * h))
    return np.stack(columns, axis=-1)


class TestGaussianKernel:
    """Tests for the Gaussian kernel."""

    def test_peak_value(self):
        """Test k_r(0) = 1."""
        assert GaussianKernel(0.7).evaluate(np.zeros(2)) == 1.0

    def test_known_value(self):
        """Test exp(-1/2) at distance r."""
        kernel = GaussianKernel(2.0)
        assert kernel.evaluate(np.array([0.0, 2.0])) == pytest.approx(np.exp(-0.5))

    def test_gradient_matches_finite_differences(self, rng):
        """Test the analytic gradient against central differences."""
        kernel = GaussianKernel(0.5)
        x = rng.normal(size=(7, 2))
        numeric = central_difference(kernel.evaluate, x)
        np.testing.assert_allclose(kernel.gradient(x), numeric, rtol=1e-6, atol=1e-9)

    def test_gradient_vanishes_at_origin(self):
        """Test grad k_r(0) = 0."""
        np.testing.assert_array_equal(kernel_grad(GaussianKernel(1.0), np.zeros(2)), [0.0, 0.0])

    def test_batched_shapes(self):
        """Test evaluation over leading batch axes."""
        x = np.zeros((3, 4, 2))
        kernel = GaussianKernel(1.0)
        assert kernel_eval(kernel, x).shape == (3, 4)
        assert kernel_grad(kernel, x).shape == (3, 4, 2)

    @pytest.mark.parametrize("r", [0.0, -1.0, float("nan")])
    def test_invalid_scale(self, r):
        """Test non-positive and non-finite scales are rejected."""
        with pytest.raises(ConfigurationError, match="kernel scale must be positive"):
            GaussianKernel(r)


class TestBSplineKernel:
    """Tests for the cubic B-spline kernel."""

    def test_peak_value(self):
        """Test b3(0) = 2/3."""
        assert BSplineKernel(1.0).evaluate(np.zeros(2)) == pytest.approx(BSPLINE_PEAK)

    def test_compact_support(self):
        """Test the kernel vanishes beyond 2r."""
        kernel = BSplineKernel(0.5)
        assert kernel.evaluate(np.array([1.0, 0.0])) == 0.0
        assert kernel.evaluate(np.array([0.8, 0.7])) == 0.0

    def test_continuity_at_knot(self):
        """Test both pieces agree at |x| = r."""
        kernel = BSplineKernel(1.0)
        inside = kernel.evaluate(np.array([1.0 - 1e-9, 0.0]))
        outside = kernel.evaluate(np.array([1.0 + 1e-9, 0.0]))
        assert inside == pytest.approx(1.0 / 6.0, abs=1e-8)
        assert outside == pytest.approx(1.0 / 6.0, abs=1e-8)

    def test_gradient_matches_finite_differences(self, rng):
        """Test the analytic gradient against central differences inside the support."""
        kernel = BSplineKernel(1.0)
        x = rng.uniform(-1.2, 1.2, size=(9, 2))
        numeric = central_difference(kernel.evaluate, x)
        np.testing.assert_allclose(kernel.gradient(x), numeric, rtol=1e-5, atol=1e-8)

    def test_gradient_finite_at_origin(self):
        """Test the gradient at the center is zero, not NaN."""
        np.testing.assert_array_equal(BSplineKernel(0.3).gradient(np.zeros(2)), [0.0, 0.0])


class TestMakeKernel:
    """Tests for kernel construction by name."""

    def test_known_kinds(self):
        """Test both supported kinds."""
        assert isinstance(make_kernel("gaussian", 1.0), GaussianKernel)
        assert isinstance(make_kernel("bspline", 1.0), BSplineKernel)

    def test_unknown_kind(self):
        """Test an unknown kind name."""
        with pytest.raises(ConfigurationError, match="unknown kernel kind"):
            make_kernel("laplace", 1.0)


class TestNoiseBasis:
    """Tests for the noise-field basis."""

    @pytest.fixture
    def mixed_basis(self):
        return NoiseBasis(
            centers=[[0.0, 0.0], [1.0, 0.5], [-0.5, 0.3]],
            amplitudes=[[0.1, 0.0], [0.0, 0.2], [0.05, -0.05]],
            scales=[0.5, 0.8, 0.6],
            kinds=("gaussian", "bspline", "gaussian"),
        )

    def test_field_value(self, mixed_basis):
        """Test sigma_l(delta_l) = a_l k(0)."""
        values = noise_eval(mixed_basis, mixed_basis.centers[1])
        np.testing.assert_allclose(values[1], [0.0, 0.2 * BSPLINE_PEAK])

    def test_shapes(self, mixed_basis):
        """Test evaluate and jacobian shapes over batch axes."""
        x = np.zeros((5, 4, 2))
        assert mixed_basis.evaluate(x).shape == (5, 4, 3, 2)
        assert mixed_basis.jacobian(x).shape == (5, 4, 3, 2, 2)

    def test_jacobian_matches_finite_differences(self, mixed_basis, rng):
        """Test D sigma_l[alpha, gamma] = d sigma_l^alpha / d x_gamma."""
        x = rng.uniform(-0.5, 0.8, size=(6, 2))
        numeric = central_difference(mixed_basis.evaluate, x)
        np.testing.assert_allclose(noise_jacobian(mixed_basis, x), numeric, rtol=1e-5, atol=1e-9)

    def test_empty_basis(self):
        """Test the basis with no fields."""
        basis = NoiseBasis.empty()
        assert basis.n_fields == 0
        assert basis.evaluate(np.zeros((3, 2))).shape == (3, 0, 2)

    def test_mismatched_arrays(self):
        """Test inconsistent array lengths."""
        with pytest.raises(ConfigurationError, match="disagree"):
            NoiseBasis([[0.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [1.0], ("gaussian",))

    def test_non_positive_scale(self):
        """Test a zero noise scale."""
        with pytest.raises(ConfigurationError, match="noise scales must be positive"):
            NoiseBasis([[0.0, 0.0]], [[1.0, 0.0]], [0.0], ("gaussian",))

    def test_unknown_kind(self):
        """Test an unknown per-field kind."""
        with pytest.raises(ConfigurationError, match="unknown noise kernel kinds"):
            NoiseBasis([[0.0, 0.0]], [[1.0, 0.0]], [1.0], ("cauchy",))

    def test_immutable(self, mixed_basis):
        """Test the stored arrays are read-only."""
        with pytest.raises(ValueError):
            mixed_basis.centers[0, 0] = 5.0

    def test_scaled_and_with_scale(self, mixed_basis):
        """Test amplitude scaling and scale replacement."""
        np.testing.assert_allclose(mixed_basis.scaled(2.0).amplitudes, 2.0 * mixed_basis.amplitudes)
        np.testing.assert_allclose(mixed_basis.with_scale(0.3).scales, [0.3, 0.3, 0.3])

    def test_translated(self, mixed_basis):
        """Test translating the basis translates its fields."""
        shift = np.array([0.3, -0.2])
        x = np.array([[0.1, 0.2], [0.9, 0.4]])
        np.testing.assert_allclose(
            mixed_basis.translated(shift).evaluate(x + shift), mixed_basis.evaluate(x)
        )

    def test_document_round_trip(self, mixed_basis):
        """Test conversion to and from the JSON document form."""
        restored = NoiseBasis.from_document(mixed_basis.to_document())
        np.testing.assert_array_equal(restored.centers, mixed_basis.centers)
        np.testing.assert_array_equal(restored.amplitudes, mixed_basis.amplitudes)
        np.testing.assert_array_equal(restored.scales, mixed_basis.scales)
        assert restored.kinds == mixed_basis.kinds

    def test_summary(self, mixed_basis):
        """Test the manifest summary."""
        summary = basis_summary(mixed_basis)
        assert summary["n_fields"] == 3
        assert summary["kinds"] == ["bspline", "gaussian"]
        assert summary["max_amplitude"] == pytest.approx(0.2)


class TestMakeGridBasis:
    """Tests for grid placement of noise fields."""

    def test_four_by_four(self):
        """Test a 4x4 grid has 16 fields at cell centers."""
        basis = make_grid_basis([0.0, 0.0, 4.0, 4.0], 4, 0.5, 0.1)
        assert basis.n_fields == 16
        assert sorted(set(basis.centers[:, 0])) == [0.5, 1.5, 2.5, 3.5]
        np.testing.assert_allclose(basis.amplitudes, 0.1)

    def test_split_axes(self):
        """Test two axis-aligned fields per center."""
        basis = make_grid_basis([0.0, 0.0, 1.0, 1.0], 3, 0.5, [0.1, 0.2], split_axes=True)
        assert basis.n_fields == 18
        np.testing.assert_allclose(basis.amplitudes[0], [0.1, 0.0])
        np.testing.assert_allclose(basis.amplitudes[1], [0.0, 0.2])
        np.testing.assert_array_equal(basis.centers[0], basis.centers[1])

    def test_bspline_grid(self):
        """Test the kind is applied to every field."""
        basis = make_grid_basis([0.0, 0.0, 1.0, 1.0], 9, 0.2, 0.1, kind="bspline")
        assert set(basis.kinds) == {"bspline"}
        assert basis.n_fields == 81

    def test_degenerate_bbox(self):
        """Test an empty rectangle."""
        with pytest.raises(ConfigurationError, match="degenerate bounding box"):
            make_grid_basis([0.0, 0.0, 0.0, 1.0], 4, 0.5, 0.1)


class TestBrownian:
    """Tests for seeded Brownian increments."""

    def test_reproducible(self):
        """Test the same seed gives identical increments."""
        a = brownian_sample(42, 19, 16, 1.0 / 19)
        b = brownian_sample(42, 19, 16, 1.0 / 19)
        np.testing.assert_array_equal(a.increments, b.increments)

    def test_seeds_differ(self):
        """Test distinct seeds give distinct increments."""
        a = brownian_sample(1, 10, 4, 0.1)
        b = brownian_sample(2, 10, 4, 0.1)
        assert not np.array_equal(a.increments, b.increments)

    def test_variance(self):
        """Test increments have variance dt."""
        path = brownian_sample(7, 40000, 1, 0.01)
        assert path.increments.var() == pytest.approx(0.01, rel=0.05)
        assert abs(path.increments.mean()) < 0.002

    def test_aggregate(self):
        """Test block sums preserve the total and the horizon."""
        path = brownian_sample(3, 12, 2, 1.0 / 12)
        coarse = path.aggregate(4)
        assert coarse.n_steps == 4
        assert coarse.horizon == pytest.approx(1.0)
        np.testing.assert_allclose(coarse.increments.sum(axis=0), path.increments.sum(axis=0))
        np.testing.assert_allclose(coarse.increments[0], path.increments[:3].sum(axis=0))

    def test_aggregate_not_divisible(self):
        """Test aggregation into a non-divisor number of intervals."""
        with pytest.raises(ConfigurationError, match="cannot aggregate"):
            brownian_sample(3, 10, 2, 0.1).aggregate(3)

    def test_zero_path(self):
        """Test the all-zero path."""
        path = BrownianPath.zeros(5, 3, 0.2)
        assert path.horizon == pytest.approx(1.0)
        assert not path.increments.any()

    def test_batch_shape(self):
        """Test the batched generator layout."""
        assert brownian_batch(0, 8, 20, 3, 0.05).shape == (20, 8, 3)

    def test_invalid_seed(self):
        """Test negative seeds are rejected."""
        with pytest.raises(ConfigurationError, match="64-bit"):
            brownian_sample(-1, 10, 1, 0.1)

    def test_derive_seed(self):
        """Test sub-seeds are deterministic and distinct per key."""
        assert derive_seed(5, 0) == derive_seed(5, 0)
        assert derive_seed(5, 0) != derive_seed(5, 1)
        assert derive_seed(5, 0, 1) != derive_seed(5, 1, 0)
        assert 0 <= derive_seed(2**64 - 1, 3) < 2**64
