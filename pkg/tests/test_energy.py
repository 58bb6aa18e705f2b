"""Tests for the objective terms and their bookkeeping."""

import numpy as np
import pytest
from vardeblur.energy import EnergyBreakdown
from vardeblur.energy import EnergyLog
from vardeblur.energy import EnergyParams
from vardeblur.energy import charbonnier
from vardeblur.energy import data_energy
from vardeblur.energy import edge_map
from vardeblur.energy import read_energy_log
from vardeblur.energy import residual_energy_map
from vardeblur.energy import residual_normal
from vardeblur.energy import residual_normal_diagonal
from vardeblur.energy import restoration_objective
from vardeblur.energy import spatial_energy
from vardeblur.energy import temporal_energy
from vardeblur.energy import total_energy
from vardeblur.energy import total_variation
from vardeblur.exceptions import ConfigError
from vardeblur.exceptions import DimensionMismatchError
from vardeblur.imagecore import FlowField
from vardeblur.imagecore import Image
from vardeblur.imagecore import SigmaMap
from vardeblur.operators import build_blur_op


def zero_flows(count, width, height):
    return [FlowField.zeros(width, height)] * count


class TestEdgeMap:
    """Edge-aware weights from the initial latent frame."""

    def test_constant_image_gives_ones(self):
        """Test that a flat image has weight exactly one everywhere."""
        g = edge_map(Image.constant(8, 6, 0.4, channels=3), 0.01)
        np.testing.assert_array_equal(g, 1.0)

    def test_gradient_equal_to_bandwidth(self):
        """Test exp(-1) where the squared gradient equals v_i."""
        v_i = (25.0 / 255.0) ** 2
        data = np.zeros((4, 4))
        data[:, 2:] = np.sqrt(v_i)
        g = edge_map(Image(data), v_i)
        assert g[0, 1] == pytest.approx(np.exp(-1.0))
        assert g[0, 0] == 1.0

    def test_values_in_unit_interval(self, color_image):
        """Test that weights lie in (0, 1]."""
        g = edge_map(color_image, (25.0 / 255.0) ** 2)
        assert g.shape == color_image.shape
        assert np.all(g > 0) and np.all(g <= 1)

    def test_rejects_non_positive_bandwidth(self, gray_image):
        """Test that v_i must be positive."""
        with pytest.raises(ConfigError):
            edge_map(gray_image, 0.0)


class TestDataEnergy:
    """Derivative-domain data term."""

    def _energy(self, latents, blurries, lam=250.0, sigma=0.0, **kwargs):
        height, width = latents[0].shape
        count = len(latents)
        return data_energy(
            latents,
            zero_flows(count, width, height),
            zero_flows(count, width, height),
            [SigmaMap.constant(width, height, sigma)] * count,
            blurries,
            [0.5] * count,
            lam,
            **kwargs,
        )

    def test_identity_kernels_and_equal_frames(self, gray_image):
        """Test zero energy when L equals B and the kernels are identities."""
        assert self._energy([gray_image], [gray_image]) == pytest.approx(0.0, abs=1e-20)

    def test_exact_blur_gives_zero(self, gray_image, rng):
        """Test zero energy when B is the blurred latent."""
        fwd = FlowField(rng.uniform(-2, 2, (32, 32)), rng.uniform(-2, 2, (32, 32)))
        bwd = FlowField(rng.uniform(-2, 2, (32, 32)), rng.uniform(-2, 2, (32, 32)))
        sigma = SigmaMap(rng.uniform(0, 1.5, (32, 32)))
        op = build_blur_op(fwd, bwd, 0.5, sigma)
        blurry = Image(op.apply(gray_image.data))
        energy = data_energy(
            [gray_image], [fwd], [bwd], [sigma], [blurry], [0.5], 250.0
        )
        assert energy <= 1e-10

    def test_interior_impulse(self, gray_image):
        """Test 4 lambda eps^2 for an impulse added to one interior pixel."""
        eps = 0.05
        data = np.array(gray_image.data)
        data[10, 12, 0] += eps
        energy = self._energy([Image(data)], [gray_image], lam=3.0)
        assert energy == pytest.approx(4 * 3.0 * eps**2, rel=1e-9)

    def test_quadratic_homogeneity(self, gray_image, make_textured):
        """Test that scaling L and B by c scales the energy by c^2."""
        other = make_textured(32, 32, seed=9)
        base = self._energy([gray_image], [other], sigma=1.0)
        scaled = self._energy(
            [Image(0.5 * gray_image.data)], [Image(0.5 * other.data)], sigma=1.0
        )
        assert scaled == pytest.approx(0.25 * base, rel=1e-9)

    def test_intensity_residual_adds_energy(self, gray_image):
        """Test that the optional intensity residual pins the DC offset."""
        shifted = Image(gray_image.data + 0.1)
        assert self._energy([shifted], [gray_image]) == pytest.approx(0.0, abs=1e-18)
        pinned = self._energy([shifted], [gray_image], lam=1.0, intensity_weight=0.1)
        assert pinned == pytest.approx(0.1 * 0.01 * 32 * 32)

    def test_shape_mismatch(self, gray_image):
        """Test that latent and blurry must agree."""
        with pytest.raises(DimensionMismatchError):
            self._energy([gray_image], [Image(np.zeros((32, 32, 3)))])

    def test_masked_pixel_is_ignored(self, gray_image):
        """Test that residuals touching an excluded pixel carry no energy."""
        data = np.array(gray_image.data)
        data[10, 12, 0] += 0.05
        mask = np.ones((32, 32), dtype=bool)
        mask[10, 12] = False
        energy = self._energy(
            [Image(data)], [gray_image], lam=3.0, intensity_weight=0.1, masks=[mask]
        )
        assert energy == pytest.approx(0.0, abs=1e-20)

    def test_full_mask_matches_no_mask(self, gray_image, make_textured):
        """Test that an all-valid mask changes nothing."""
        other = make_textured(32, 32, seed=9)
        mask = np.ones((32, 32), dtype=bool)
        plain = self._energy([gray_image], [other], sigma=0.8)
        masked = self._energy([gray_image], [other], sigma=0.8, masks=[mask])
        assert masked == plain

    def test_mask_shape_mismatch(self, gray_image):
        """Test that a mask on another grid is refused."""
        with pytest.raises(DimensionMismatchError):
            self._energy([gray_image], [gray_image], masks=[np.ones((31, 32), bool)])


class TestResidualNormal:
    """Half-gradient of the data energy over the residual, and its diagonal."""

    def test_matches_central_difference(self, rng):
        """Test the exact quadratic difference quotient with a random mask."""
        residual = rng.standard_normal((6, 7, 3))
        direction = rng.standard_normal((6, 7, 3))
        mask = rng.random((6, 7)) > 0.3
        step = 1e-3

        def energy(r):
            return float(residual_energy_map(r, 2.5, 0.1, mask).sum())

        numeric = (
            energy(residual + step * direction) - energy(residual - step * direction)
        ) / (2 * step)
        normal = residual_normal(residual, 2.5, 0.1, mask)
        analytic = 2 * float((normal * direction).sum())
        assert analytic == pytest.approx(numeric, rel=1e-7)

    def test_diagonal_matches_unit_responses(self, rng):
        """Test the diagonal against the operator applied to unit vectors."""
        mask = rng.random((5, 6)) > 0.3
        diagonal = residual_normal_diagonal((5, 6), 2.0, 0.1, mask)
        for y in range(5):
            for x in range(6):
                unit = np.zeros((5, 6))
                unit[y, x] = 1.0
                response = residual_normal(unit, 2.0, 0.1, mask)
                assert diagonal[y, x] == pytest.approx(response[y, x], abs=1e-12)

    def test_unmasked_interior_diagonal(self):
        """Test four neighbour pairs per interior pixel without a mask."""
        diagonal = residual_normal_diagonal((4, 5, 1), 1.0)
        assert diagonal[1, 1] == 4.0
        assert diagonal[0, 0] == 2.0
        assert diagonal[-1, -1] == 2.0


class TestTemporalEnergy:
    """Robust warping term."""

    @staticmethod
    def _shifted_pair(make_textured):
        first = make_textured(16, 20, seed=4)
        second = np.empty_like(first.data)
        second[:, 1:] = first.data[:, :-1]
        second[:, 0] = first.data[:, 0]
        return first, Image(second)

    def test_static_sequence_is_zero(self, static_sequence):
        """Test identical frames with zero flows."""
        flows = zero_flows(3, 24, 24)
        assert temporal_energy(static_sequence, flows, flows, 2.0, 2) == 0.0

    def test_integer_shift_with_matching_flow(self, make_textured):
        """Test zero energy when the flow explains the shift exactly."""
        first, second = self._shifted_pair(make_textured)
        right = FlowField.uniform(20, 16, 1.0, 0.0)
        fwds = [right, right]
        bwds = [-right, -right]
        energy = temporal_energy([first, second], fwds, bwds, 2.0, 1)
        assert energy == pytest.approx(0.0, abs=1e-12)

    def test_integer_shift_with_zero_flow(self, make_textured):
        """Test the direct Charbonnier sum when the flow is ignored."""
        first, second = self._shifted_pair(make_textured)
        flows = zero_flows(2, 20, 16)
        energy = temporal_energy([first, second], flows, flows, 2.0, 1, eps=1e-3)
        oracle = 2.0 * 2 * charbonnier(first.data - second.data, 1e-3).sum()
        assert energy == pytest.approx(oracle, rel=1e-10)
        assert energy > 0

    def test_single_frame_is_zero(self, gray_image):
        """Test that a lone frame has no neighbours."""
        flows = zero_flows(1, 32, 32)
        assert temporal_energy([gray_image], flows, flows, 2.0, 2) == 0.0

    def test_chained_neighbours_counted(self, make_textured):
        """Test that radius 2 adds the chained pair on a three-frame clip."""
        frames = [make_textured(12, 12, seed=s) for s in range(3)]
        flows = zero_flows(3, 12, 12)
        near = temporal_energy(frames, flows, flows, 1.0, 1)
        far = temporal_energy(frames, flows, flows, 1.0, 2)
        extra = 2 * charbonnier(frames[0].data - frames[2].data).sum()
        assert far == pytest.approx(near + extra, rel=1e-10)


class TestSpatialEnergy:
    """Total-variation priors."""

    def test_constant_fields_are_zero(self):
        """Test that flat latents, flows and maps carry no TV."""
        L = Image.constant(8, 8, 0.5)
        flow = FlowField.uniform(8, 8, 1.0, 2.0)
        parts = spatial_energy(
            [L],
            [flow],
            [flow],
            [SigmaMap.constant(8, 8, 1.0)],
            20.0,
            20.0,
            [np.ones((8, 8))],
        )
        assert parts == {"spatial_l": 0.0, "spatial_u": 0.0, "spatial_sigma": 0.0}

    def test_ramp_total_variation(self):
        """Test (W - 1) * H * s for a horizontal ramp with exact L1."""
        s = 0.05
        ramp = np.tile(np.arange(10) * s, (6, 1))
        assert total_variation(ramp, eps=0.0) == pytest.approx(9 * 6 * s)

    def test_smoothed_ramp(self):
        """Test the Charbonnier-smoothed value of the same ramp."""
        s = 0.05
        ramp = np.tile(np.arange(10) * s, (6, 1))
        expected = 9 * 6 * (np.sqrt(s * s + 1e-6) - 1e-3)
        assert total_variation(ramp) == pytest.approx(expected)

    def test_weights_scale_flow_prior(self):
        """Test that edge weights multiply the flow and blur-map TV."""
        ramp = np.tile(np.arange(6) * 0.5, (5, 1))
        flow = FlowField(ramp, np.zeros((5, 6)))
        sigma = SigmaMap(ramp)
        L = [Image.constant(6, 5, 0.2)]
        ones = spatial_energy(L, [flow], [flow], [sigma], 1.0, 1.0, [np.ones((5, 6))])
        half = spatial_energy(
            L, [flow], [flow], [sigma], 1.0, 1.0, [np.full((5, 6), 0.5)]
        )
        assert half["spatial_u"] == pytest.approx(0.5 * ones["spatial_u"])
        assert half["spatial_sigma"] == pytest.approx(0.5 * ones["spatial_sigma"])
        assert ones["spatial_u"] == pytest.approx(2 * ones["spatial_sigma"])


class TestTotalEnergy:
    """Full objective and its decomposition."""

    def test_consistent_state_has_only_priors(
        self, static_sequence, make_state, blur_with
    ):
        """Test that data and temporal vanish for a self-consistent state."""
        state = make_state(static_sequence, sigma=1.0)
        state = make_state(static_sequence, blur_with(state), sigma=1.0)
        breakdown = total_energy(state, EnergyParams())
        assert breakdown.data <= 1e-10
        assert breakdown.temporal == 0.0
        priors = (
            breakdown.spatial_l + breakdown.spatial_u + breakdown.spatial_sigma
        )
        assert breakdown.total == pytest.approx(priors)

    def test_perturbation_increases_data(
        self, static_sequence, rng, make_state, blur_with
    ):
        """Test that moving L away from the consistent latent raises the data term."""
        state = make_state(static_sequence, sigma=1.0)
        state = make_state(static_sequence, blur_with(state), sigma=1.0)
        noisy = [
            Image(L.data + 0.01 * rng.standard_normal(L.data.shape))
            for L in static_sequence
        ]
        before = total_energy(state, EnergyParams()).data
        after = total_energy(state.with_latents(noisy), EnergyParams()).data
        assert after > before

    def test_decomposition_and_signs(self, make_textured, make_state):
        """Test that the total is the sum of non-negative parts."""
        frames = [make_textured(16, 16, seed=s) for s in range(3)]
        blurries = [make_textured(16, 16, seed=s + 10) for s in range(3)]
        state = make_state(frames, blurries, sigma=0.7)
        breakdown = total_energy(state, EnergyParams())
        parts = [
            breakdown.data,
            breakdown.temporal,
            breakdown.spatial_l,
            breakdown.spatial_u,
            breakdown.spatial_sigma,
        ]
        assert all(p >= 0 for p in parts)
        assert breakdown.total == pytest.approx(sum(parts), rel=1e-9)

    def test_deterministic(self, make_textured, make_state):
        """Test that repeated evaluation gives the same breakdown."""
        frames = [make_textured(16, 16, seed=s) for s in range(2)]
        state = make_state(frames, sigma=0.5)
        assert total_energy(state, EnergyParams()) == total_energy(
            state, EnergyParams()
        )

    def test_restoration_objective_uses_exact_l1(self, static_sequence, make_state):
        """Test the latent objective on a static clip with identity kernels."""
        state = make_state(static_sequence)
        objective = restoration_objective(state, EnergyParams())
        expected = 3 * total_variation(static_sequence[0].data, eps=0.0)
        assert objective == pytest.approx(expected)


class TestParamsAndLog:
    """Parameter validation, breakdown arithmetic and the JSON-lines log."""

    def test_breakdown_total(self):
        """Test that the total is filled in from the parts."""
        b = EnergyBreakdown(1.0, 2.0, 3.0, 4.0, 5.0)
        assert b.total == 15.0
        assert b.to_dict()["total"] == 15.0

    @pytest.mark.parametrize(
        "changes",
        [{"lam": -1.0}, {"v_i": 0.0}, {"n": 0}, {"charbonnier_eps": 0.0}],
    )
    def test_invalid_params(self, changes):
        """Test that out-of-range weights are rejected."""
        with pytest.raises(ConfigError):
            EnergyParams(**changes)

    def test_log_round_trip(self, tmp_path):
        """Test one JSON object per record, with context merged in."""
        path = tmp_path / "energy.jsonl"
        with EnergyLog(path) as log:
            log.record(EnergyBreakdown(1.0, 0.0, 0.0, 0.0, 0.0), level=0, stage="L")
            log.record(EnergyBreakdown(0.5, 0.0, 0.0, 0.0, 0.0), level=0, stage="u")
            assert log.records == 2
        entries = read_energy_log(path)
        assert [e["stage"] for e in entries] == ["L", "u"]
        assert entries[1]["total"] == 0.5
