"""Loss values, gradients, identities, and clamping behavior.

Frozen expected values were computed independently before implementation:
closed-form Gaussian KL by hand (cross-checked by Monte-Carlo sampling) and
the smoothed cross-entropy by direct evaluation of its defining sum.
"""

import math

import numpy as np
import pytest

from bnadapt.errors import ContractError, DimensionError, NumericalError, ParameterError
from bnadapt.losses import (
    bnm_loss,
    bnm_loss_grad,
    ce_smooth_loss,
    ce_smooth_loss_grad,
    im_loss,
    im_loss_grad,
    joint_loss,
)
from bnadapt.numerics import make_rng
from bnadapt.oracle import grad_check

# KL(N(0,1) || N(0,4)) = (ln 4)/2 - 3/8; Monte-Carlo cross-check gave
# 0.3186 +- 0.0012 at n=2e5.
KL_VAR_MISMATCH = 0.3181471805599453
# -0.95*ln(0.8) - 0.05*ln(0.2), evaluated directly.
CE_SMOOTH_EXAMPLE = 0.2924582693702043


class TestBnmLoss:
    def test_matched_statistics_zero(self):
        mu = np.array([0.3, -1.0, 2.0])
        var = np.array([0.5, 1.0, 2.5])
        assert bnm_loss(mu, var, mu, var) == 0.0

    def test_mean_shift(self):
        """KL(N(0,1) || N(1,1)) = 0.5."""
        assert bnm_loss([1.0], [1.0], [0.0], [1.0]) == pytest.approx(0.5, abs=1e-15)

    def test_variance_mismatch(self):
        """KL(N(0,1) || N(0,4)) = (ln 4)/2 - 3/8."""
        value = bnm_loss([0.0], [4.0], [0.0], [1.0])
        assert value == pytest.approx(KL_VAR_MISMATCH, abs=1e-15)

    def test_direction_regression(self):
        """The stored statistics are the first KL argument; swapping the
        roles changes the value (KL is asymmetric)."""
        forward = bnm_loss([0.0], [4.0], [0.0], [1.0])
        swapped = bnm_loss([0.0], [1.0], [0.0], [4.0])
        assert forward == pytest.approx(KL_VAR_MISMATCH, abs=1e-15)
        assert swapped == pytest.approx(0.5 * (math.log(0.25) + 4.0 - 1.0), abs=1e-14)
        assert abs(forward - swapped) > 0.1

    def test_channel_average(self):
        one = bnm_loss([1.0], [1.0], [0.0], [1.0])
        two = bnm_loss([1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0])
        assert two == pytest.approx(one / 2.0, abs=1e-15)

    def test_nonnegative_iff_matched(self):
        rng = make_rng(5)
        for _ in range(1000):
            bm = rng.uniform(-3, 3, 4)
            bv = rng.uniform(0.1, 5, 4)
            sm = rng.uniform(-3, 3, 4)
            sv = rng.uniform(0.1, 5, 4)
            assert bnm_loss(bm, bv, sm, sv) > 0.0
            assert bnm_loss(sm, sv, sm, sv) == 0.0

    def test_variance_clamped_below(self):
        value = bnm_loss([0.0], [0.0], [0.0], [1.0])
        assert math.isfinite(value)

    def test_nan_variance_rejected(self):
        with pytest.raises(NumericalError, match="channel 1"):
            bnm_loss([0.0, 0.0], [1.0, float("nan")], [0.0, 0.0], [1.0, 1.0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            bnm_loss([0.0], [1.0], [0.0, 0.0], [1.0, 1.0])


class TestBnmLossGrad:
    def test_zero_at_match(self):
        mu = np.array([0.5, -2.0])
        var = np.array([1.5, 0.7])
        gm, gv = bnm_loss_grad(mu, var, mu, var)
        np.testing.assert_array_equal(gm, np.zeros(2))
        np.testing.assert_array_equal(gv, np.zeros(2))

    def test_matches_finite_differences(self):
        rng = make_rng(9)
        for _ in range(20):
            sm = rng.uniform(-2, 2, 3)
            sv = rng.uniform(0.2, 4, 3)
            point = np.concatenate([rng.uniform(-2, 2, 3), rng.uniform(0.2, 4, 3)])

            def f(x):
                value = bnm_loss(x[:3], x[3:], sm, sv)
                gm, gv = bnm_loss_grad(x[:3], x[3:], sm, sv)
                return value, np.concatenate([gm, gv])

            assert grad_check(f, point, step=1e-4) < 1e-6

    def test_variance_stationary_point(self):
        """For fixed means the loss is minimized in the batch variance at
        stored_var + (mean gap)^2, where its gradient vanishes."""
        sm, sv = np.array([0.5]), np.array([2.0])
        bm = np.array([-0.25])
        opt_var = sv + (sm - bm) ** 2
        _, gv = bnm_loss_grad(bm, opt_var, sm, sv)
        assert gv[0] == pytest.approx(0.0, abs=1e-15)
        eps = 1e-3
        below = bnm_loss(bm, opt_var - eps, sm, sv)
        at = bnm_loss(bm, opt_var, sm, sv)
        above = bnm_loss(bm, opt_var + eps, sm, sv)
        assert at < below and at < above


class TestImLoss:
    def test_uniform_rows_zero(self):
        probs = np.full((4, 3), 1.0 / 3.0)
        assert im_loss(probs) == 0.0

    def test_diverse_one_hot_minimum(self):
        """The three distinct one-hot rows attain the minimum -log 3 (up to
        one ulp: the irrational value is not representable)."""
        value = im_loss(np.eye(3))
        assert abs(value - (-math.log(3.0))) <= 2 * np.spacing(math.log(3.0))

    def test_repeated_one_hot_zero(self):
        probs = np.tile([1.0, 0.0, 0.0], (5, 1))
        assert im_loss(probs) == 0.0

    def test_range_bounds(self):
        rng = make_rng(21)
        for _ in range(200):
            raw = rng.uniform(0.01, 1.0, (6, 4))
            probs = raw / raw.sum(axis=1, keepdims=True)
            value = im_loss(probs)
            assert -math.log(4.0) - 1e-12 <= value <= math.log(4.0) + 1e-12

    def test_row_permutation_invariance(self):
        rng = make_rng(22)
        raw = rng.uniform(0.01, 1.0, (6, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        perm = rng.permutation(6)
        assert im_loss(probs) == pytest.approx(im_loss(probs[perm]), abs=1e-12)

    def test_class_permutation_invariance(self):
        rng = make_rng(23)
        raw = rng.uniform(0.01, 1.0, (6, 4))
        probs = raw / raw.sum(axis=1, keepdims=True)
        perm = rng.permutation(4)
        assert im_loss(probs) == pytest.approx(im_loss(probs[:, perm]), abs=1e-12)

    def test_bad_row_sum_rejected(self):
        probs = np.array([[0.5, 0.4], [0.5, 0.5]])
        with pytest.raises(ContractError, match="row 0"):
            im_loss(probs)

    def test_gradient_matches_finite_differences(self):
        """Checked directly in probability space with a step small enough to
        stay inside the row-sum tolerance."""
        rng = make_rng(24)
        raw = rng.uniform(0.05, 1.0, (5, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)

        def f(x):
            p = x.reshape(5, 3)
            return im_loss(p), im_loss_grad(p).ravel()

        assert grad_check(f, probs.ravel(), step=1e-7) < 1e-5


class TestCeSmoothLoss:
    def test_uniform_prediction(self):
        probs = np.full((3, 4), 0.25)
        labels = np.array([0, 2, 3])
        for alpha in (0.0, 0.1, 0.5):
            assert ce_smooth_loss(probs, labels, alpha) == pytest.approx(
                math.log(4.0), abs=1e-12
            )

    def test_perfect_prediction_alpha_zero(self):
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 1])
        assert ce_smooth_loss(probs, labels, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_frozen_example(self):
        probs = np.array([[0.8, 0.2]])
        value = ce_smooth_loss(probs, np.array([0]), 0.1)
        assert value == pytest.approx(CE_SMOOTH_EXAMPLE, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            ce_smooth_loss(np.array([[0.5, 0.5]]), np.array([2]), 0.1)

    def test_bad_alpha(self):
        with pytest.raises(ParameterError):
            ce_smooth_loss(np.array([[0.5, 0.5]]), np.array([0]), 1.0)

    def test_gradient_matches_finite_differences(self):
        rng = make_rng(25)
        raw = rng.uniform(0.05, 1.0, (4, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = np.array([0, 2, 1, 1])

        def f(x):
            p = x.reshape(4, 3)
            return (
                ce_smooth_loss(p, labels, 0.1),
                ce_smooth_loss_grad(p, labels, 0.1).ravel(),
            )

        assert grad_check(f, probs.ravel(), step=1e-7) < 1e-5


class TestJointLoss:
    def test_lambda_zero_is_im_exactly(self):
        rng = make_rng(26)
        raw = rng.uniform(0.05, 1.0, (6, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        stats = (np.array([0.1, 0.2]), np.array([1.0, 2.0]))
        stored = (np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        value = joint_loss(probs, stats, stored, 0.0)
        assert value.total == im_loss(probs)
        assert value.lam == 0.0

    def test_weighted_sum_arithmetic(self):
        """With im = 0 (uniform rows) and bnm = 0.5 the paper-default weight
        of 10 gives a total of 5; shifting im by known amounts follows."""
        probs = np.full((4, 3), 1.0 / 3.0)
        stats = (np.array([1.0]), np.array([1.0]))
        stored = (np.array([0.0]), np.array([1.0]))
        value = joint_loss(probs, stats, stored, 10.0)
        assert value.components["im"] == 0.0
        assert value.components["bnm"] == pytest.approx(0.5, abs=1e-15)
        assert value.total == pytest.approx(5.0, abs=1e-12)

    def test_composed_minimum(self):
        """Matched statistics plus diverse one-hot predictions reach -log K."""
        stats = (np.array([0.5]), np.array([2.0]))
        value = joint_loss(np.eye(3), stats, stats, 10.0)
        assert value.components["bnm"] == 0.0
        assert value.total == pytest.approx(-math.log(3.0), abs=1e-14)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ParameterError):
            joint_loss(np.eye(2), ([0.0], [1.0]), ([0.0], [1.0]), -1.0)
