"""Objective terms against per-cell scalar oracles and closed forms."""

import math

import numpy as np
import pytest

import aftrack.tensor as T
from aftrack import ConfigError, DegenerateInputError, NumericError, UsageError
from aftrack.losses import LossWeights, bce_loss, iou_loss, total_loss

from oracles import bce_naive, iou_naive


def random_distances(rng, hw, lo=1.0, hi=20.0):
    return rng.uniform(lo, hi, size=(4,) + hw)


def random_mask(rng, hw, p=0.4):
    m = (rng.uniform(size=hw) < p).astype(np.float64)
    if m.sum() == 0:
        m[hw[0] // 2, hw[1] // 2] = 1.0
    return m


def iou_loss_oracle(pred, tgt, mask):
    """Cell-wise corner-form IoU, then -ln with the documented clamp."""
    total, n = 0.0, 0
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j] == 0:
                continue
            pa = (-pred[0, i, j], -pred[1, i, j], pred[2, i, j], pred[3, i, j])
            ta = (-tgt[0, i, j], -tgt[1, i, j], tgt[2, i, j], tgt[3, i, j])
            v = min(max(iou_naive(pa, ta), 1e-6), 1.0)
            total += -math.log(v)
            n += 1
    return total / n, total


class TestIouLoss:
    def test_perfect_prediction_is_zero(self):
        rng = np.random.default_rng(0)
        t = random_distances(rng, (5, 5))
        m = random_mask(rng, (5, 5))
        t *= m  # unmasked cells carry no target, as the label builder emits
        loss = iou_loss(T.tensor(t.copy()), t, m)
        assert loss.item() == 0.0

    def test_single_cell_known_iou(self):
        # IoU of (0,0,10/e,10) against (0,0,10,10) anchored at the shared
        # corner is exactly (10/e)/10, so the loss is 1 up to rounding.
        pred = np.zeros((4, 3, 3))
        tgt = np.zeros((4, 3, 3))
        m = np.zeros((3, 3))
        m[1, 1] = 1.0
        tgt[:, 1, 1] = (0.0, 0.0, 10.0, 10.0)
        pred[:, 1, 1] = (0.0, 0.0, 10.0 / math.e, 10.0)
        loss = iou_loss(T.tensor(pred), tgt, m)
        assert loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_cellwise_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            hw = (rng.integers(2, 7), rng.integers(2, 7))
            pred = random_distances(rng, hw)
            tgt = random_distances(rng, hw)
            m = random_mask(rng, hw)
            want_mean, want_sum = iou_loss_oracle(pred, tgt, m)
            got_mean = iou_loss(T.tensor(pred), tgt, m).item()
            got_sum = iou_loss(T.tensor(pred), tgt, m, reduction="sum").item()
            assert got_mean == pytest.approx(want_mean, rel=1e-12)
            assert got_sum == pytest.approx(want_sum, rel=1e-12)

    def test_nonnegative_and_zero_only_at_match(self):
        rng = np.random.default_rng(3)
        pred = random_distances(rng, (4, 4))
        tgt = random_distances(rng, (4, 4))
        m = np.ones((4, 4))
        assert iou_loss(T.tensor(pred), tgt, m).item() > 0.0
        assert iou_loss(T.tensor(tgt.copy()), tgt, m).item() == 0.0

    def test_empty_mask_rejected(self):
        pred = np.ones((4, 3, 3))
        with pytest.raises(DegenerateInputError):
            iou_loss(T.tensor(pred), pred, np.zeros((3, 3)))

    def test_negative_distances_rejected(self):
        pred = np.ones((4, 3, 3))
        bad = pred.copy()
        bad[0, 0, 0] = -0.5
        with pytest.raises(UsageError):
            iou_loss(T.tensor(bad), pred, np.ones((3, 3)))

    def test_unmasked_cells_do_not_leak(self):
        # Zero-distance rows outside the mask must not poison the result.
        rng = np.random.default_rng(11)
        pred = random_distances(rng, (3, 3))
        tgt = random_distances(rng, (3, 3))
        m = np.zeros((3, 3))
        m[0, 2] = 1.0
        pred[:, 1, 1] = 0.0
        tgt[:, 1, 1] = 0.0
        want, _ = iou_loss_oracle(pred, tgt, m)
        assert iou_loss(T.tensor(pred), tgt, m).item() == pytest.approx(want, rel=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(19)
        tgt = random_distances(rng, (3, 3))
        m = random_mask(rng, (3, 3))
        # Keep pred away from targets so min() ties cannot sit on a kink.
        pred = T.parameter(tgt * rng.uniform(1.1, 1.6, size=tgt.shape))

        report = T.grad_check(
            lambda P: iou_loss(P["pred"], tgt, m), {"pred": pred}, tol=1e-4
        )
        assert report.passed, str(report)

    def test_bad_reduction_rejected(self):
        pred = np.ones((4, 2, 2))
        with pytest.raises(UsageError):
            iou_loss(T.tensor(pred), pred, np.ones((2, 2)), reduction="median")


class TestBceLoss:
    def test_half_everywhere_is_ln2(self):
        rng = np.random.default_rng(2)
        y = (rng.uniform(size=(6, 6)) < 0.3).astype(np.float64)
        pm, nm = y, 1.0 - y
        pred = T.tensor(np.full((6, 6), 0.5))
        loss = bce_loss(pred, y, pm, nm)
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-14)

    def test_matches_scalar_oracle_balanced(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            hw = (rng.integers(2, 6), rng.integers(2, 6))
            p = rng.uniform(0.05, 0.95, size=hw)
            y = rng.uniform(0.0, 1.0, size=hw)
            pm = random_mask(rng, hw, p=0.3)
            nm = (1.0 - pm) * (rng.uniform(size=hw) < 0.5)
            n_pos, n_neg = pm.sum(), nm.sum()
            want = 0.0
            for i in range(hw[0]):
                for j in range(hw[1]):
                    cell = bce_naive(p[i, j], y[i, j])
                    if pm[i, j]:
                        want += 0.5 * cell / n_pos
                    elif nm[i, j] and n_neg:
                        want += 0.5 * cell / n_neg
            if n_neg == 0:
                want = sum(
                    bce_naive(p[i, j], y[i, j])
                    for i in range(hw[0]) for j in range(hw[1]) if pm[i, j]
                ) / n_pos
            got = bce_loss(T.tensor(p), y, pm, nm).item()
            assert got == pytest.approx(want, rel=1e-12)

    def test_soft_label_minimum(self):
        rng = np.random.default_rng(9)
        y = rng.uniform(0.2, 0.8, size=(4, 4))
        pm = np.ones((4, 4))
        nm = np.zeros((4, 4))
        at_label = bce_loss(T.tensor(y.copy()), y, pm, nm).item()
        entropy = float(np.mean(-(y * np.log(y) + (1 - y) * np.log(1 - y))))
        assert at_label == pytest.approx(entropy, rel=1e-12)
        for delta in (0.05, -0.05):
            moved = bce_loss(T.tensor(np.clip(y + delta, 0.01, 0.99)), y, pm, nm).item()
            assert moved > at_label

    def test_logit_gradient_closed_form(self):
        rng = np.random.default_rng(13)
        z = T.parameter(rng.uniform(-2.5, 2.5, size=(5, 5)))
        y = rng.uniform(0.0, 1.0, size=(5, 5))
        pm = random_mask(rng, (5, 5), p=0.4)
        nm = 1.0 - pm
        loss = bce_loss(T.sigmoid(z), y, pm, nm)
        loss.backward()
        p = 1.0 / (1.0 + np.exp(-z.data))
        w = 0.5 * pm / pm.sum() + 0.5 * nm / nm.sum()
        np.testing.assert_allclose(z.grad, w * (p - y), rtol=1e-10, atol=1e-14)

    def test_one_sided_means(self):
        p = np.array([[0.2, 0.8], [0.6, 0.4]])
        y = np.array([[1.0, 1.0], [0.0, 0.0]])
        pos_only = bce_loss(T.tensor(p), y, np.ones((2, 2)), np.zeros((2, 2))).item()
        want = np.mean([bce_naive(p.flat[i], y.flat[i]) for i in range(4)])
        assert pos_only == pytest.approx(want, rel=1e-12)
        neg_only = bce_loss(T.tensor(p), y, np.zeros((2, 2)), np.ones((2, 2))).item()
        assert neg_only == pytest.approx(want, rel=1e-12)

    def test_clamp_keeps_saturated_predictions_finite(self):
        p = np.array([[1e-12, 1.0 - 1e-12]])
        y = np.array([[1.0, 0.0]])
        loss = bce_loss(T.tensor(p), y, np.ones((1, 2)), np.zeros((1, 2))).item()
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_empty_masks_rejected(self):
        p = T.tensor(np.full((2, 2), 0.5))
        with pytest.raises(DegenerateInputError):
            bce_loss(p, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_overlapping_masks_rejected(self):
        p = T.tensor(np.full((2, 2), 0.5))
        with pytest.raises(UsageError):
            bce_loss(p, np.zeros((2, 2)), np.ones((2, 2)), np.ones((2, 2)))

    def test_labels_out_of_range_rejected(self):
        p = T.tensor(np.full((2, 2), 0.5))
        y = np.full((2, 2), 1.5)
        with pytest.raises(UsageError):
            bce_loss(p, y, np.ones((2, 2)), np.zeros((2, 2)))

    def test_gradients(self):
        rng = np.random.default_rng(23)
        z = T.parameter(rng.uniform(-2.0, 2.0, size=(4, 4)))
        y = rng.uniform(0.1, 0.9, size=(4, 4))
        pm = random_mask(rng, (4, 4))
        nm = 1.0 - pm

        report = T.grad_check(
            lambda P: bce_loss(T.sigmoid(P["z"]), y, pm, nm), {"z": z}, tol=1e-4
        )
        assert report.passed, str(report)


class TestTotalLoss:
    def test_default_weights_pinned_value(self):
        assert total_loss(1.0, 2.0, 3.0).item() == pytest.approx(6.6, rel=1e-15)

    def test_zero_weights_reduce_to_reg(self):
        w = LossWeights(lambda1=0.0, lambda2=0.0)
        assert total_loss(4.25, 7.0, 9.0, w).item() == 4.25

    def test_linearity(self):
        rng = np.random.default_rng(1)
        w = LossWeights(lambda1=0.5, lambda2=2.0)
        a, b, c = rng.uniform(0.1, 3.0, size=3)
        base = total_loss(a, b, c, w).item()
        assert total_loss(2 * a, b, c, w).item() == pytest.approx(base + a, rel=1e-12)
        assert total_loss(a, 2 * b, c, w).item() == pytest.approx(base + 0.5 * b, rel=1e-12)
        assert total_loss(a, b, 2 * c, w).item() == pytest.approx(base + 2.0 * c, rel=1e-12)

    def test_propagates_gradients(self):
        l1 = T.parameter(np.array(2.0))
        l2 = T.parameter(np.array(3.0))
        l3 = T.parameter(np.array(4.0))
        total_loss(l1, l2, l3, LossWeights(1.0, 1.2)).backward()
        assert l1.grad == pytest.approx(1.0)
        assert l2.grad == pytest.approx(1.0)
        assert l3.grad == pytest.approx(1.2)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            total_loss(float("nan"), 1.0, 1.0)

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda1=-0.1)
