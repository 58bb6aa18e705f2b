"""Tests for the blur and derivative operators."""

import numpy as np
import pytest
from scipy.ndimage import convolve
from vardeblur.exceptions import ConfigError
from vardeblur.exceptions import DimensionMismatchError
from vardeblur.imagecore import FlowField
from vardeblur.imagecore import SigmaMap
from vardeblur.operators import GradientOp
from vardeblur.operators import IdentityOp
from vardeblur.operators import blur_footprint_mask
from vardeblur.operators import build_blur_op
from vardeblur.operators import build_defocus_op
from vardeblur.operators import build_motion_blur_op
from vardeblur.operators import compose
from vardeblur.operators import estimate_operator_norm
from vardeblur.operators import rasterize_motion_kernel


def dense_kernel_oracle(fwd, bwd, tau, samples=20000):
    """Splat many uniform samples of both half-streaks bilinearly."""
    keys = []
    weights = []
    t = (np.arange(samples) + 0.5) / samples
    for vec in (fwd, bwd):
        px = tau * vec[0] * t
        py = tau * vec[1] * t
        x0 = np.floor(px).astype(int)
        y0 = np.floor(py).astype(int)
        ax = px - x0
        ay = py - y0
        for dx, dy, w in (
            (0, 0, (1 - ax) * (1 - ay)),
            (1, 0, ax * (1 - ay)),
            (0, 1, (1 - ax) * ay),
            (1, 1, ax * ay),
        ):
            keys.append(np.stack([x0 + dx, y0 + dy], axis=1))
            weights.append(w * 0.5 / samples)
    unique, inverse = np.unique(np.concatenate(keys), axis=0, return_inverse=True)
    totals = np.bincount(inverse.ravel(), weights=np.concatenate(weights))
    return {(int(x), int(y)): float(w) for (x, y), w in zip(unique, totals)}


def gaussian_kernel(sigma):
    radius = int(np.ceil(3 * sigma))
    d = np.arange(-radius, radius + 1)
    profile = np.exp(-(d**2) / (2 * sigma**2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def kernel_array(taps, radius):
    """Dense (2R+1)x(2R+1) array of a tap dict, indexed [dy, dx]."""
    out = np.zeros((2 * radius + 1, 2 * radius + 1))
    for (dx, dy), w in taps.items():
        out[radius + dy, radius + dx] = w
    return out


def assert_adjoint(op, rng, trials=10, channels=None):
    shape = tuple(op.in_shape) + ((channels,) if channels else ())
    out_shape = tuple(op.out_shape) + ((channels,) if channels else ())
    for _ in range(trials):
        x = rng.standard_normal(shape)
        y = rng.standard_normal(out_shape)
        lhs = float((op.apply(x) * y).sum())
        rhs = float((x * op.adjoint(y)).sum())
        bound = 1e-6 * (np.linalg.norm(x) * np.linalg.norm(y) + 1)
        assert abs(lhs - rhs) <= bound


def random_flows(rng, width, height, scale=3.0):
    fwd = FlowField(
        rng.uniform(-scale, scale, (height, width)),
        rng.uniform(-scale, scale, (height, width)),
    )
    bwd = FlowField(
        rng.uniform(-scale, scale, (height, width)),
        rng.uniform(-scale, scale, (height, width)),
    )
    return fwd, bwd


class TestMotionKernel:
    """Rasterization of the bidirectional line kernel."""

    def test_zero_motion_is_point_mass(self):
        """Test that zero vectors give a single unit tap."""
        taps = rasterize_motion_kernel((0, 0), (0, 0), 0.5)
        assert taps == pytest.approx({(0, 0): 1.0})

    def test_symmetric_horizontal_streak(self):
        """Test exact weights of the streak spanning x in [-2, 2]."""
        taps = rasterize_motion_kernel((4, 0), (-4, 0), 0.5)
        expected = {
            (-2, 0): 0.125,
            (-1, 0): 0.25,
            (0, 0): 0.25,
            (1, 0): 0.25,
            (2, 0): 0.125,
        }
        assert set(taps) == set(expected)
        for key, value in expected.items():
            assert taps[key] == pytest.approx(value, abs=1e-12)

    def test_one_sided_vertical_streak(self):
        """Test that a zero backward vector adds its half mass at the origin."""
        taps = rasterize_motion_kernel((0, 6), (0, 0), 0.5)
        assert taps[(0, 0)] == pytest.approx(0.5 + 1 / 12)
        assert taps[(0, 1)] == pytest.approx(1 / 6)
        assert taps[(0, 2)] == pytest.approx(1 / 6)
        assert taps[(0, 3)] == pytest.approx(1 / 12)
        forward_mass = sum(taps.values()) - 0.5
        assert forward_mass == pytest.approx(0.5)

    def test_matches_dense_sampling_oracle(self, rng):
        """Test random vectors against many-sample splatting."""
        for _ in range(100):
            fwd = tuple(rng.uniform(-5, 5, 2))
            bwd = tuple(rng.uniform(-5, 5, 2))
            tau = float(rng.uniform(0, 1))
            taps = rasterize_motion_kernel(fwd, bwd, tau)
            oracle = dense_kernel_oracle(fwd, bwd, tau)
            for key in set(taps) | set(oracle):
                assert abs(taps.get(key, 0.0) - oracle.get(key, 0.0)) <= 1e-3

    def test_weights_are_a_distribution(self, rng, tau):
        """Test non-negative weights summing to one."""
        taps = rasterize_motion_kernel(
            tuple(rng.uniform(-4, 4, 2)), tuple(rng.uniform(-4, 4, 2)), tau
        )
        assert min(taps.values()) >= 0.0
        assert sum(taps.values()) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_bad_tau(self):
        """Test that the duty cycle must lie in [0, 1]."""
        with pytest.raises(ConfigError):
            rasterize_motion_kernel((1, 0), (-1, 0), 1.5)

    def test_rejects_non_finite_vector(self):
        """Test that NaN motion is refused."""
        with pytest.raises(ConfigError):
            rasterize_motion_kernel((np.nan, 0), (0, 0), 0.5)


class TestMotionBlurOp:
    """Per-pixel motion blur operator."""

    def test_zero_flow_is_identity(self, gray_image):
        """Test that zero flows leave the image unchanged."""
        zero = FlowField.zeros(32, 32)
        op = build_motion_blur_op(zero, zero, 0.5)
        np.testing.assert_allclose(op.apply(gray_image.data), gray_image.data)

    def test_impulse_response_is_kernel(self):
        """Test that a centred impulse reproduces the kernel taps."""
        fwd = FlowField.uniform(21, 21, 4.0, 0.0)
        bwd = FlowField.uniform(21, 21, -4.0, 0.0)
        op = build_motion_blur_op(fwd, bwd, 0.5)
        impulse = np.zeros((21, 21))
        impulse[10, 10] = 1.0
        stamped = op.adjoint(impulse)
        taps = rasterize_motion_kernel((4, 0), (-4, 0), 0.5)
        for (dx, dy), w in taps.items():
            assert stamped[10 + dy, 10 + dx] == pytest.approx(w, abs=1e-12)
        assert stamped.sum() == pytest.approx(1.0)

    def test_rows_are_distributions(self, rng):
        """Test row sums and signs with random flows and border clipping."""
        fwd, bwd = random_flows(rng, 15, 12)
        op = build_motion_blur_op(fwd, bwd, 0.7)
        np.testing.assert_allclose(op.row_sums(), 1.0, atol=1e-12)
        assert op.min_weight() >= 0.0
        row = op.row(0, 0)
        assert all(dx >= 0 and dy >= 0 for dx, dy in row)

    def test_preserves_constant_image(self, rng):
        """Test that a constant image passes through unchanged."""
        fwd, bwd = random_flows(rng, 15, 12)
        op = build_motion_blur_op(fwd, bwd, 0.5)
        np.testing.assert_allclose(op.apply(np.full((12, 15, 3), 0.37)), 0.37)

    def test_adjoint_identity(self, rng, channels):
        """Test the inner-product identity with random flows."""
        fwd, bwd = random_flows(rng, 13, 11)
        op = build_motion_blur_op(fwd, bwd, 0.5)
        assert_adjoint(op, rng, channels=channels)

    def test_flow_size_mismatch(self):
        """Test that forward and backward flows must agree in size."""
        with pytest.raises(DimensionMismatchError):
            build_motion_blur_op(FlowField.zeros(8, 8), FlowField.zeros(9, 8), 0.5)

    def test_stencil_holds_only_used_offsets(self):
        """Test that one long vector adds its streak, not a full square."""
        u = np.zeros((16, 24))
        u[5, 5] = 10.0
        zero = FlowField.zeros(24, 16)
        op = build_motion_blur_op(FlowField(u, np.zeros((16, 24))), zero, 1.0)
        assert len(op.offsets) <= 11
        assert not op.offsets[:, 0].any()
        taps = rasterize_motion_kernel((10, 0), (0, 0), 1.0)
        assert op.row(5, 5) == pytest.approx(taps, abs=1e-12)

    def test_bands_with_different_motion(self):
        """Test rows of every raster band when bands use different offsets."""
        u = np.zeros((70, 20))
        v = np.zeros((70, 20))
        u[:35] = 3.0
        v[35:] = -2.0
        fwd = FlowField(u, v)
        op = build_motion_blur_op(fwd, -fwd, 0.5)
        np.testing.assert_allclose(op.row_sums(), 1.0, atol=1e-12)
        top = rasterize_motion_kernel((3, 0), (-3, 0), 0.5)
        bottom = rasterize_motion_kernel((0, -2), (0, 2), 0.5)
        for (y, x), taps in (((10, 10), top), ((60, 10), bottom)):
            assert op.row(y, x) == pytest.approx(taps, abs=1e-12)

    def test_column_energy_matches_dense_matrix(self, rng):
        """Test the squared column norms against the assembled matrix."""
        fwd, bwd = random_flows(rng, 7, 6)
        op = build_motion_blur_op(fwd, bwd, 0.8)
        columns = []
        for k in range(42):
            unit = np.zeros(42)
            unit[k] = 1.0
            columns.append(op.apply(unit.reshape(6, 7)).ravel())
        dense = np.stack(columns, axis=1)
        expected = (dense**2).sum(axis=0).reshape(6, 7)
        np.testing.assert_allclose(op.column_energy(), expected, atol=1e-12)

    def test_input_size_mismatch(self):
        """Test that applying to a wrongly sized array raises."""
        op = build_motion_blur_op(FlowField.zeros(8, 8), FlowField.zeros(8, 8), 0.5)
        with pytest.raises(DimensionMismatchError):
            op.apply(np.zeros((7, 8)))


class TestDefocusOp:
    """Spatially varying Gaussian blur."""

    def test_zero_sigma_is_identity(self, color_image):
        """Test that a zero blur map gives the identity."""
        op = build_defocus_op(SigmaMap.constant(20, 24, 0.0))
        assert op.radius == 0
        np.testing.assert_array_equal(op.apply(color_image.data), color_image.data)

    def test_small_sigma_snaps_to_identity(self, gray_image):
        """Test that sigma below the threshold keeps a unit tap."""
        op = build_defocus_op(SigmaMap.constant(32, 32, 0.04))
        np.testing.assert_allclose(op.apply(gray_image.data), gray_image.data)

    def test_uniform_sigma_matches_dense_convolution(self, gray_image):
        """Test sigma=2 against a dense truncated Gaussian away from borders."""
        op = build_defocus_op(SigmaMap.constant(32, 32, 2.0))
        ours = op.apply(gray_image.data)[:, :, 0]
        oracle = convolve(gray_image.data[:, :, 0], gaussian_kernel(2.0))
        np.testing.assert_allclose(ours[6:-6, 6:-6], oracle[6:-6, 6:-6], atol=1e-6)

    def test_impulse_centre_value(self):
        """Test the centre tap of the 7x7 truncated kernel at sigma=1."""
        op = build_defocus_op(SigmaMap.constant(15, 15, 1.0))
        impulse = np.zeros((15, 15))
        impulse[7, 7] = 1.0
        out = op.apply(impulse)
        assert out[7, 7] == pytest.approx(gaussian_kernel(1.0)[3, 3], abs=1e-12)
        assert out[7, 7] == pytest.approx(0.1592, abs=1e-4)

    def test_rows_are_distributions(self, rng):
        """Test row sums with a varying map and border clipping."""
        op = build_defocus_op(SigmaMap(rng.uniform(0, 2, (10, 12))))
        np.testing.assert_allclose(op.row_sums(), 1.0, atol=1e-12)
        assert op.min_weight() >= 0.0
        np.testing.assert_allclose(op.apply(np.full((10, 12), 0.6)), 0.6)

    def test_zero_sigma_pixel_has_unit_row(self, rng):
        """Test that a zero entry in a varying map gives a single tap."""
        sigma = rng.uniform(0.5, 2, (10, 12))
        sigma[4, 5] = 0.0
        op = build_defocus_op(SigmaMap(sigma))
        assert op.row(4, 5) == {(0, 0): 1.0}

    def test_adjoint_identity(self, rng, channels):
        """Test the inner-product identity with a random blur map."""
        op = build_defocus_op(SigmaMap(rng.uniform(0, 1.5, (11, 9))))
        assert_adjoint(op, rng, channels=channels)


class TestBlurFootprintMask:
    """Pixels whose whole blur footprint stays inside the frame."""

    def test_no_blur_keeps_every_pixel(self):
        """Test that zero motion and zero defocus mark the full frame."""
        zero = FlowField.zeros(9, 7)
        mask = blur_footprint_mask(zero, zero, 0.5, SigmaMap.constant(9, 7, 0.0))
        assert mask.shape == (7, 9)
        assert mask.all()

    def test_streak_and_defocus_bands(self):
        """Test the excluded border for a 2 px half-streak and 3 px reach."""
        fwd = FlowField.uniform(30, 20, 4.0, 0.0)
        sigma = SigmaMap.constant(30, 20, 1.0)
        mask = blur_footprint_mask(fwd, -fwd, 0.5, sigma)
        assert mask[3:-3, 5:-5].all()
        assert not mask[:, :5].any()
        assert not mask[:, -5:].any()
        assert not mask[:3].any()
        assert not mask[-3:].any()

    def test_shape_mismatch(self):
        """Test that flows and blur map must share a grid."""
        with pytest.raises(DimensionMismatchError):
            blur_footprint_mask(
                FlowField.zeros(8, 8),
                FlowField.zeros(8, 8),
                0.5,
                SigmaMap.constant(9, 8, 0.0),
            )


class TestCompose:
    """Composition and the derivative operator."""

    def test_identity_composition(self, gray_image):
        """Test that composing identities is the identity."""
        op = compose(IdentityOp((32, 32)), IdentityOp((32, 32)))
        np.testing.assert_array_equal(op.apply(gray_image.data), gray_image.data)

    def test_blur_composite_matches_dense_convolution(self):
        """Test K G on an impulse against convolving the two kernels."""
        size = 41
        centre = size // 2
        fwd = FlowField.uniform(size, size, 4.0, 0.0)
        bwd = FlowField.uniform(size, size, -4.0, 0.0)
        op = build_blur_op(fwd, bwd, 0.5, SigmaMap.constant(size, size, 1.0))
        impulse = np.zeros((size, size))
        impulse[centre, centre] = 1.0
        motion = kernel_array(rasterize_motion_kernel((4, 0), (-4, 0), 0.5), 3)
        stamped = np.zeros((size, size))
        stamped[centre - 3 : centre + 4, centre - 3 : centre + 4] = gaussian_kernel(1.0)
        oracle = convolve(stamped, motion, mode="constant")
        np.testing.assert_allclose(op.apply(impulse), oracle, atol=1e-12)

    def test_composite_adjoint_identity(self, rng):
        """Test the inner-product identity for K G."""
        fwd, bwd = random_flows(rng, 12, 10)
        op = build_blur_op(fwd, bwd, 0.5, SigmaMap(rng.uniform(0, 1.5, (10, 12))))
        assert_adjoint(op, rng)

    def test_mismatched_composition(self):
        """Test that inner output must match outer input."""
        with pytest.raises(DimensionMismatchError):
            compose(IdentityOp((4, 4)), IdentityOp((5, 4)))

    def test_gradient_adjoint_identity(self, rng):
        """Test the inner-product identity for forward differences."""
        assert_adjoint(GradientOp((9, 8)), rng)

    def test_operator_norm_estimates(self):
        """Test power iteration on the identity and the gradient."""
        assert estimate_operator_norm(IdentityOp((6, 5))) == pytest.approx(1.0)
        grad_norm = estimate_operator_norm(GradientOp((16, 16)))
        assert 1.0 < grad_norm <= np.sqrt(8.0) + 1e-9
