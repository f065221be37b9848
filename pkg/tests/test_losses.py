import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointsplat.errors import PointsplatError
from pointsplat.losses import (LossWeights, PredictionPyramid,
                               default_loop_weights, downsample_image,
                               frequency_loss, l1_loss,
                               progressive_multiscale_frequency_loss,
                               progressive_multiscale_image_loss, psnr,
                               total_loss)


def direct_dft_loss(pred, gt):
    """O(N^2) direct-summation DFT oracle for frequency_loss."""
    pred = np.atleast_3d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_3d(np.asarray(gt, dtype=np.float64))
    h, w, c = pred.shape
    ys, xs = np.arange(h), np.arange(w)
    total = 0.0
    for ch in range(c):
        d = pred[:, :, ch] - gt[:, :, ch]
        for ku in range(h):
            for kv in range(w):
                phase = np.exp(-2j * np.pi * (ku * ys[:, None] / h + kv * xs[None, :] / w))
                total += abs((d * phase).sum())
    return total / (h * w)


def literal_l1(pred, gt):
    """Double-loop transcription of the mean-over-pixels L1 sum."""
    h, w, c = pred.shape
    acc = 0.0
    for yy in range(h):
        for xx in range(w):
            acc += sum(abs(pred[yy, xx, ch] - gt[yy, xx, ch]) for ch in range(c))
    return acc / (h * w)


class TestL1Loss:
    def test_identical_is_zero(self):
        img = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert l1_loss(img, img) == 0.0

    def test_constant_offset(self):
        gt = np.random.default_rng(1).uniform(size=(6, 5, 3))
        assert l1_loss(gt + 0.1, gt) == pytest.approx(0.3, abs=1e-12)

    def test_matches_literal_formula(self):
        rng = np.random.default_rng(2)
        pred, gt = rng.uniform(size=(7, 9, 3)), rng.uniform(size=(7, 9, 3))
        assert l1_loss(pred, gt) == pytest.approx(literal_l1(pred, gt), abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(PointsplatError):
            l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-5, 5, allow_nan=False))
    def test_translation_invariance(self, delta):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(4, 4, 2)), rng.uniform(size=(4, 4, 2))
        assert l1_loss(a + delta, b + delta) == pytest.approx(l1_loss(a, b), abs=1e-10)


class TestDownsample:
    def test_identity(self):
        img = np.random.default_rng(4).uniform(size=(8, 8, 3))
        np.testing.assert_array_equal(downsample_image(img, 1.0), img)

    def test_constant_preserved(self):
        img = np.full((8, 8, 2), 0.37)
        np.testing.assert_allclose(downsample_image(img, 0.25), np.full((2, 2, 2), 0.37))

    def test_checkerboard_halving(self):
        img = np.indices((4, 4)).sum(axis=0) % 2
        out = downsample_image(img.astype(float), 0.5)
        np.testing.assert_array_equal(out, np.full((2, 2, 1), 0.5))

    def test_indivisible_rejected(self):
        with pytest.raises(PointsplatError):
            downsample_image(np.zeros((6, 6, 1)), 0.25)

    def test_non_reciprocal_rejected(self):
        with pytest.raises(PointsplatError):
            downsample_image(np.zeros((8, 8, 1)), 0.3)


class TestProgressiveImageLoss:
    def test_perfect_pyramid_zero(self):
        gt = np.random.default_rng(5).uniform(size=(8, 8, 3))
        pyr = PredictionPyramid.from_image(gt)
        assert progressive_multiscale_image_loss(pyr, gt) == 0.0

    def test_single_loop_single_scale_weight(self):
        gt = np.zeros((4, 4, 1))
        pred = np.full((4, 4, 1), 0.2)  # inner L1 = 0.2
        pyr = PredictionPyramid([[pred]], scale_factors=(1.0,))
        val = progressive_multiscale_image_loss(pyr, gt, w=(0.75,))
        assert val == pytest.approx(0.15, abs=1e-12)

    def test_matches_literal_triple_sum(self):
        rng = np.random.default_rng(6)
        gt = rng.uniform(size=(8, 8, 3))
        factors = (1.0, 0.5, 0.25)
        preds = [[rng.uniform(size=(int(8 * f), int(8 * f), 3)) for f in factors]
                 for _ in range(2)]
        pyr = PredictionPyramid(preds, factors)
        weights = default_loop_weights(2)
        expected = 0.0
        for l in range(2):
            for s, f in enumerate(factors):
                expected += weights[l] * literal_l1(preds[l][s], downsample_image(gt, f))
        got = progressive_multiscale_image_loss(pyr, gt)
        assert got == pytest.approx(expected, abs=1e-7)

    def test_zero_weight_removes_loop(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(size=(4, 4, 1))
        preds = [[rng.uniform(size=(4, 4, 1))], [rng.uniform(size=(4, 4, 1))]]
        pyr = PredictionPyramid(preds, scale_factors=(1.0,))
        only_second = progressive_multiscale_image_loss(pyr, gt, w=(0.0, 1.0))
        direct = l1_loss(preds[1][0], gt)
        assert only_second == pytest.approx(direct, abs=1e-12)

    def test_default_loop_weight_rule(self):
        assert default_loop_weights(2) == (0.75, 1.0)
        assert default_loop_weights(3) == (0.75, 1.0, 1.0)

    def test_pyramid_validation(self):
        with pytest.raises(PointsplatError):
            PredictionPyramid([[np.zeros((4, 4, 1))]], scale_factors=(1.0, 0.5))
        with pytest.raises(PointsplatError):
            PredictionPyramid([[np.zeros((4, 4, 1)), np.zeros((2, 2, 1))]],
                              scale_factors=(0.5, 1.0))


class TestFrequencyLoss:
    def test_identical_zero(self):
        img = np.random.default_rng(8).uniform(size=(8, 8, 3))
        assert frequency_loss(img, img) == 0.0

    def test_constant_vs_zero_is_kappa(self):
        kappa = 0.37
        pred = np.full((8, 16, 1), kappa)
        assert frequency_loss(pred, np.zeros((8, 16, 1))) == pytest.approx(kappa, abs=1e-12)

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(9)
        pred, gt = rng.uniform(size=(8, 8, 2)), rng.uniform(size=(8, 8, 2))
        assert frequency_loss(pred, gt) == pytest.approx(direct_dft_loss(pred, gt), abs=1e-10)

    def test_shift_strictly_positive(self):
        rng = np.random.default_rng(10)
        gt = rng.uniform(size=(8, 8, 1))
        shifted = np.roll(gt, 1, axis=1)
        assert frequency_loss(shifted, gt) > 1e-3

    def test_multichannel_sums(self):
        rng = np.random.default_rng(11)
        a1, b1 = rng.uniform(size=(4, 4, 1)), rng.uniform(size=(4, 4, 1))
        a2, b2 = rng.uniform(size=(4, 4, 1)), rng.uniform(size=(4, 4, 1))
        stacked = frequency_loss(np.concatenate([a1, a2], 2), np.concatenate([b1, b2], 2))
        assert stacked == pytest.approx(frequency_loss(a1, b1) + frequency_loss(a2, b2),
                                        abs=1e-12)


class TestProgressiveFrequencyLoss:
    def test_perfect_pyramid_zero(self):
        gt = np.random.default_rng(12).uniform(size=(8, 8, 3))
        pyr = PredictionPyramid.from_image(gt)
        assert progressive_multiscale_frequency_loss(pyr, gt) == pytest.approx(0.0, abs=1e-12)

    def test_one_mismatched_scale(self):
        rng = np.random.default_rng(13)
        gt = rng.uniform(size=(8, 8, 1))
        stack = [downsample_image(gt, f) for f in (1.0, 0.5, 0.25)]
        bad = rng.uniform(size=(4, 4, 1))
        preds = [list(stack), [stack[0], bad, stack[2]]]
        pyr = PredictionPyramid(preds)
        got = progressive_multiscale_frequency_loss(pyr, gt)
        expected = 1.0 * frequency_loss(bad, downsample_image(gt, 0.5))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_matches_literal_triple_sum(self):
        rng = np.random.default_rng(14)
        gt = rng.uniform(size=(8, 8, 2))
        factors = (1.0, 0.5)
        preds = [[rng.uniform(size=(int(8 * f), int(8 * f), 2)) for f in factors]
                 for _ in range(2)]
        pyr = PredictionPyramid(preds, factors)
        expected = 0.0
        for l, wl in enumerate(default_loop_weights(2)):
            for s, f in enumerate(factors):
                expected += wl * direct_dft_loss(preds[l][s], downsample_image(gt, f))
        got = progressive_multiscale_frequency_loss(pyr, gt)
        assert got == pytest.approx(expected, abs=1e-6)


class TestTotalLossAndPsnr:
    def test_paper_default_weights(self):
        assert total_loss(1.0, 1.0, 1.0) == pytest.approx(2.0, abs=1e-15)

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0) == 0.0

    def test_linearity(self):
        rng = np.random.default_rng(15)
        w = LossWeights(0.5, 2.0, 0.125)
        a, b, c = rng.uniform(size=3)
        base = total_loss(a, b, c, w)
        assert total_loss(3 * a, b, c, w) == pytest.approx(base + 2 * 0.5 * a, abs=1e-12)
        assert total_loss(a, 3 * b, c, w) == pytest.approx(base + 2 * 2.0 * b, abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(PointsplatError):
            LossWeights(gamma1=-0.1)

    def test_psnr_saturation(self):
        img = np.random.default_rng(16).uniform(size=(4, 4, 3))
        assert psnr(img, img) == math.inf

    def test_psnr_uniform_error(self):
        gt = np.zeros((8, 8, 3))
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_matches_literal_mse(self):
        rng = np.random.default_rng(17)
        pred, gt = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
        mse = float(np.mean((pred - gt) ** 2))
        assert psnr(pred, gt) == pytest.approx(10 * math.log10(1 / mse), abs=1e-12)
