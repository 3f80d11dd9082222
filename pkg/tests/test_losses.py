"""Loss values against hand-computed oracles, input validation, and
gradients against finite differences."""

import math

import numpy as np
import pytest

from jointseg import losses, ops
from jointseg.tensor import Graph, Tensor, backward

from fdcheck import check_instance


def _probs(fg: np.ndarray, dtype=np.float64) -> Tensor:
    fg = np.asarray(fg, dtype=dtype)
    return Tensor(np.stack([1.0 - fg, fg]), dtype=dtype)


class TestSegLossValues:
    def test_single_pixel_oracle(self):
        # one foreground pixel predicted at 0.5, dice_weight 1, smooth 1e-6:
        # ce = -ln(0.5); dice gap = 1 - (2*0.5 + 1e-6)/(1 + 0.5 + 1e-6)
        eps = 1e-6
        expected = -math.log(0.5) + (1.0 - (1.0 + eps) / (1.5 + eps))
        got = losses.seg_loss(_probs([[0.5]]), np.array([[1]]),
                              dice_weight=1.0, dice_smooth=eps)
        assert got.item() == pytest.approx(expected, abs=1e-5)

    def test_cross_entropy_alone_is_log2_at_even_odds(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        y[1:3, 1:3] = 1
        got = losses.seg_loss(_probs(np.full((4, 4), 0.5)), y, dice_weight=0.0)
        assert got.item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_perfect_prediction_costs_nothing(self):
        y = np.zeros((6, 6), dtype=np.uint8)
        y[2:4, 2:4] = 1
        got = losses.seg_loss(_probs(y.astype(np.float64)), y)
        assert got.item() == pytest.approx(0.0, abs=1e-9)

    def test_more_overlap_means_less_loss(self):
        y = np.zeros((8, 8), dtype=np.uint8)
        y[2:6, 2:6] = 1
        vals = []
        for match in (0.6, 0.8, 0.95):
            fg = np.where(y == 1, match, 1.0 - match)
            vals.append(losses.seg_loss(_probs(fg), y).item())
        assert vals[0] > vals[1] > vals[2]

    def test_dice_weight_scales_only_dice_part(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        y[0, 0] = 1
        fg = np.full((4, 4), 0.5)
        ce = losses.seg_loss(_probs(fg), y, dice_weight=0.0).item()
        w1 = losses.seg_loss(_probs(fg), y, dice_weight=1.0).item()
        w3 = losses.seg_loss(_probs(fg), y, dice_weight=3.0).item()
        assert w3 - ce == pytest.approx(3.0 * (w1 - ce), rel=1e-6)

    def test_empty_mask_smoothing_keeps_loss_finite(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        got = losses.seg_loss(_probs(np.full((4, 4), 0.01)), y)
        assert np.isfinite(got.item())


class TestSegLossValidation:
    def test_rejects_non_binary_target(self):
        with pytest.raises(ValueError, match="binary"):
            losses.seg_loss(_probs(np.full((2, 2), 0.5)), np.full((2, 2), 0.3))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="match"):
            losses.seg_loss(_probs(np.full((2, 2), 0.5)), np.zeros((3, 3)))

    def test_rejects_broken_channel_sums(self):
        bad = Tensor(np.full((2, 3, 3), 0.6), dtype=np.float64)
        with pytest.raises(ValueError, match="sum to 1"):
            losses.seg_loss(bad, np.zeros((3, 3)))

    def test_rejects_single_channel(self):
        with pytest.raises(ValueError, match="2xHxW"):
            losses.seg_loss(Tensor(np.ones((1, 2, 2))), np.zeros((2, 2)))


class TestL2Reg:
    def test_hand_value(self):
        a = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
        b = Tensor(np.array([[3.0]]), dtype=np.float64)
        assert losses.l2_reg([a, b]).item() == pytest.approx(1 + 4 + 9)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            losses.l2_reg([])

    def test_gradient_is_two_theta(self):
        t = Tensor(np.array([0.5, -1.5, 2.0]), dtype=np.float64)
        g = Graph()
        backward(losses.l2_reg([t], g), g)
        np.testing.assert_allclose(t.grad, 2 * t.data)


class TestJointTotal:
    def _terms(self):
        lm = [Tensor(np.array(2.0), dtype=np.float64),
              Tensor(np.array(3.0), dtype=np.float64)]
        ls = [Tensor(np.array(5.0), dtype=np.float64),
              Tensor(np.array(7.0), dtype=np.float64)]
        rm = Tensor(np.array(11.0), dtype=np.float64)
        rs = Tensor(np.array(13.0), dtype=np.float64)
        return lm, ls, rm, rs

    def test_full_combination(self):
        lm, ls, rm, rs = self._terms()
        got = losses.joint_total(ls, lm, rm, rs, myo_loss_weight=1.02,
                                 weight_decay_myo=1e-3, weight_decay_scar=1e-4)
        assert got.item() == pytest.approx(12 + 1.02 * 5 + 1e-3 * 11 + 1e-4 * 13)

    def test_zero_weights_reduce_to_scar_loss_exactly(self):
        lm, ls, rm, rs = self._terms()
        got = losses.joint_total(ls, lm, rm, rs, myo_loss_weight=0.0,
                                 weight_decay_myo=0.0, weight_decay_scar=0.0)
        assert got.item() == 12.0

    def test_batch_total_is_sum_of_singles(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        y[1:3, 1:3] = 1
        fg_a, fg_b = np.full((4, 4), 0.4), np.full((4, 4), 0.7)
        single = sum(losses.seg_loss(_probs(f), y).item() for f in (fg_a, fg_b))
        batch = losses.joint_total(
            [losses.seg_loss(_probs(f), y) for f in (fg_a, fg_b)]).item()
        assert batch == pytest.approx(single, rel=1e-12)

    def test_requires_scar_terms(self):
        with pytest.raises(ValueError):
            losses.joint_total([])


class TestLossGradients:
    def test_seg_loss_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        y = (rng.random((6, 6)) < 0.4).astype(np.uint8)
        fg = rng.uniform(0.15, 0.85, (6, 6))
        probs = _probs(fg)

        def loss(g):
            return losses.seg_loss(probs, y, dice_weight=1.0, g=g)

        res = check_instance("seg_loss", 0, loss, [probs])
        assert res.ok, f"max rel err {res.max_rel_err:.2e}"

    def test_joint_total_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        y = (rng.random((4, 4)) < 0.5).astype(np.uint8)
        pm = _probs(rng.uniform(0.2, 0.8, (4, 4)))
        ps = _probs(rng.uniform(0.2, 0.8, (4, 4)))
        wm = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
        ws = Tensor(rng.normal(size=(2, 2)), dtype=np.float64)

        def loss(g):
            lm = losses.seg_loss(pm, y, g=g)
            ls = losses.seg_loss(ps, y, g=g)
            return losses.joint_total(
                [ls], [lm], losses.l2_reg([wm], g), losses.l2_reg([ws], g),
                myo_loss_weight=1.02, weight_decay_myo=5.58e-6,
                weight_decay_scar=5.58e-6, g=g)

        res = check_instance("joint_total", 1, loss, [pm, ps, wm, ws])
        assert res.ok, f"max rel err {res.max_rel_err:.2e}"

    def test_gradient_reaches_probabilities_through_both_terms(self):
        y = np.zeros((4, 4), dtype=np.uint8)
        y[1:3, 1:3] = 1
        probs = _probs(np.full((4, 4), 0.5))
        g = Graph()
        backward(losses.seg_loss(probs, y, g=g), g)
        assert probs.grad is not None
        assert np.abs(probs.grad).max() > 0
