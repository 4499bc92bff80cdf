"""Loss primitives and composites against slow reference implementations."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from sagiri_lab.imaging import ImageBuffer
from sagiri_lab.losses import (LossWeights, SsimConfig, color_distribution_loss, compose_color_loss,
                               compose_content_loss, frequency_preservation_loss, hard_histogram, mse_loss,
                               soft_histogram, ssim_index)

# Frozen from tests/oracles.py on the seeded 4x4x3 pair below.
ORACLE_COLOR_LOSS = 6.715094950579711
ORACLE_CONTENT_LOSS = 1.2803473545116608

unit_images = arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1))


def _t(arr) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.asarray(arr, np.float64).transpose(2, 0, 1)))[None]


def _fixed_pair():
    rng = np.random.default_rng(20240601)
    return rng.random((4, 4, 3)), rng.random((4, 4, 3))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, w.lambda6) == (10, 1, 0.1, 1, 1, 0.01)

    @pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ValueError):
            LossWeights(lambda3=bad)


class TestHistograms:
    def test_soft_split_between_centers(self):
        h = soft_histogram(_t(np.full((3, 3, 1), 0.5)), 4).bins[0, 0]
        np.testing.assert_allclose(h.numpy(), [0, 4.5, 4.5, 0])

    def test_soft_full_mass_at_center(self):
        h = soft_histogram(_t(np.full((1, 1, 1), 0.375)), 4).bins[0, 0]
        np.testing.assert_allclose(h.numpy(), [0, 1, 0, 0])

    @settings(max_examples=40, deadline=None)
    @given(unit_images, st.integers(2, 80))
    def test_soft_partition_of_unity(self, img, n):
        bins = soft_histogram(_t(img), n).bins
        np.testing.assert_allclose(bins.sum(-1).numpy(), 36.0, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(unit_images, st.integers(2, 12))
    def test_soft_matches_kernel_oracle(self, img, n):
        got = soft_histogram(_t(img), n).bins[0].numpy()
        for c in range(3):
            np.testing.assert_allclose(got[c], oracles.soft_hist(img[:, :, c], n), atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(unit_images, st.integers(2, 12))
    def test_hard_counts_sum_to_pixels(self, img, n):
        assert hard_histogram(_t(img), n).bins.sum(-1).eq(36).all()

    def test_too_few_bins(self):
        with pytest.raises(ValueError):
            soft_histogram(_t(np.zeros((2, 2, 1))), 1)
        with pytest.raises(ValueError):
            hard_histogram(_t(np.zeros((2, 2, 1))), 1)


class TestColorDistribution:
    def test_worked_example(self):
        pred = np.array([0, 0, 1, 1], float).reshape(2, 2, 1)
        target = np.array([0, 0, 0, 1], float).reshape(2, 2, 1)
        assert oracles.l_cd(pred, target, 2) == 0.5
        assert float(color_distribution_loss(_t(pred), _t(target), 2, "hard")) == 0.5

    @settings(max_examples=30, deadline=None)
    @given(unit_images, st.sampled_from(["hard", "soft"]))
    def test_permutation_invariant(self, img, mode):
        perm = np.random.default_rng(0).permutation(36)
        shuffled = img.reshape(36, 3)[perm].reshape(6, 6, 3)
        assert float(color_distribution_loss(_t(img), _t(shuffled), 16, mode)) == pytest.approx(0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, unit_images, st.integers(2, 64))
    def test_bounded_by_two_per_channel(self, a, b, n):
        assert float(color_distribution_loss(_t(a), _t(b), n, "hard")) <= 6.0 + 1e-12

    def test_imagebuffer_input(self):
        px = np.random.default_rng(3).integers(0, 256, (4, 4, 3)).astype(np.uint8)
        img = ImageBuffer(px, "byte")
        assert float(color_distribution_loss(img, img, 8, "hard")) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            color_distribution_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestFrequency:
    @settings(max_examples=10, deadline=None)
    @given(arrays(np.float64, (5, 6, 2), elements=st.floats(0, 1)),
           arrays(np.float64, (5, 6, 2), elements=st.floats(0, 1)))
    def test_matches_direct_dft(self, a, b):
        assert float(frequency_preservation_loss(_t(a), _t(b))) == pytest.approx(oracles.l_fdp(a, b), abs=1e-9)

    @pytest.mark.parametrize("a,b", [(0.25, 0.75), (1.0, 0.0), (0.3, 0.3)])
    def test_constant_images(self, a, b):
        x, y = np.full((8, 8, 3), a), np.full((8, 8, 3), b)
        assert float(frequency_preservation_loss(_t(x), _t(y))) == pytest.approx(abs(a - b), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, unit_images, st.integers(0, 5), st.integers(0, 5))
    def test_shift_invariant(self, a, b, dy, dx):
        base = float(frequency_preservation_loss(_t(a), _t(b)))
        sa, sb = np.roll(a, (dy, dx), (0, 1)), np.roll(b, (dy, dx), (0, 1))
        assert float(frequency_preservation_loss(_t(sa), _t(sb))) == pytest.approx(base, rel=1e-9, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, unit_images, unit_images)
    def test_triangle_inequality(self, a, b, c):
        ab = float(frequency_preservation_loss(_t(a), _t(b)))
        bc = float(frequency_preservation_loss(_t(b), _t(c)))
        ac = float(frequency_preservation_loss(_t(a), _t(c)))
        assert ac <= ab + bc + 1e-9


class TestSsim:
    @settings(max_examples=30, deadline=None)
    @given(unit_images, st.sampled_from(["global", "gaussian"]))
    def test_identity(self, img, window):
        assert float(ssim_index(_t(img), _t(img), SsimConfig(window=window))) == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5)])
    def test_constant_closed_form(self, a, b):
        c1 = 0.01**2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        got = float(ssim_index(_t(np.full((6, 6, 3), a)), _t(np.full((6, 6, 3), b))))
        assert got == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, unit_images)
    def test_matches_global_oracle(self, a, b):
        assert float(ssim_index(_t(a), _t(b))) == pytest.approx(oracles.ssim_global(a, b), abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, st.floats(0.1, 1.0), st.floats(0, 0.5))
    def test_in_unit_interval_for_positively_related(self, img, gain, offset):
        # SSIM is only guaranteed positive when the cross-covariance is nonnegative.
        other = np.clip(img * gain * 0.5 + offset, 0, 1)
        s = float(ssim_index(_t(img), _t(other)))
        assert 0 < s <= 1 + 1e-12

    def test_anticorrelated_can_be_negative(self):
        ramp = np.linspace(0, 1, 36).reshape(6, 6, 1)
        assert float(ssim_index(_t(ramp), _t(1 - ramp))) < 0

    def test_gaussian_window_on_small_image(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        s = float(ssim_index(_t(a), _t(np.clip(a + 0.05, 0, 1)), SsimConfig(window="gaussian")))
        assert 0 < s < 1


class TestComposites:
    @settings(max_examples=30, deadline=None)
    @given(unit_images)
    def test_zero_at_identity(self, img):
        assert float(compose_color_loss(_t(img), _t(img))) == pytest.approx(0, abs=1e-9)
        assert float(compose_content_loss(_t(img), _t(img))) == pytest.approx(0, abs=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(unit_images, unit_images)
    def test_nonnegative(self, a, b):
        assert float(compose_color_loss(_t(a), _t(b))) >= 0
        assert float(compose_content_loss(_t(a), _t(b))) >= 0

    def test_weight_selection_is_mse(self):
        a, b = _fixed_pair()
        w = LossWeights(1, 0, 0, 1, 0, 0)
        assert float(compose_color_loss(_t(a), _t(b), w)) == pytest.approx(oracles.mse(a, b), rel=1e-12)
        assert float(mse_loss(_t(a), _t(b))) == pytest.approx(oracles.mse(a, b), rel=1e-12)

    def test_content_ssim_only_at_identity(self):
        a, _ = _fixed_pair()
        assert float(compose_content_loss(_t(a), _t(a), LossWeights(0, 0, 0, 0, 1, 0))) == pytest.approx(0, abs=1e-12)

    def test_color_primitive_sum(self):
        a, b = _fixed_pair()
        assert float(compose_color_loss(_t(a), _t(b))) == pytest.approx(ORACLE_COLOR_LOSS, rel=1e-9)

    def test_content_primitive_sum(self):
        a, b = _fixed_pair()
        assert float(compose_content_loss(_t(a), _t(b))) == pytest.approx(ORACLE_CONTENT_LOSS, rel=1e-9)

    def test_return_terms(self):
        a, b = _fixed_pair()
        total, terms = compose_color_loss(_t(a), _t(b), return_terms=True)
        assert set(terms) == {"mse", "cd", "fdp"}
        assert float(total) == pytest.approx(10 * float(terms["mse"]) + float(terms["cd"]) + 0.1 * float(terms["fdp"]))

    def test_gradients_flow(self):
        a, b = _fixed_pair()
        x = _t(a).requires_grad_(True)
        (compose_color_loss(x, _t(b)) + compose_content_loss(x, _t(b))).backward()
        assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0
