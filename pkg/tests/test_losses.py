import math

import numpy as np
import pytest

from crin import losses
from crin.nn import CrinModel
from crin.tensor import ShapeError, Tensor


class TestBce:
    def test_zero_logit_gives_ln2(self):
        logit = Tensor(np.zeros((2, 3)))
        target = Tensor(np.array([[1, 0, 1], [0, 1, 0]], dtype=np.float64))
        assert abs(losses.bce_loss(logit, target).item() - math.log(2)) < 1e-12

    def test_matches_naive_formula(self, rng):
        z = rng.standard_normal((2, 1, 4, 4)) * 3
        y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
        got = losses.bce_loss(Tensor(z), Tensor(y)).item()
        p = 1.0 / (1.0 + np.exp(-z))
        expected = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        assert abs(got - expected) < 1e-10

    def test_extreme_logits_stay_finite(self):
        logit = Tensor(np.array([1e4, -1e4]))
        target = Tensor(np.array([0.0, 1.0]))
        val = losses.bce_loss(logit, target).item()
        assert np.isfinite(val)
        assert abs(val - 1e4) < 1e-6  # fully wrong and confident

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="target shape"):
            losses.bce_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestDice:
    def test_perfect_prediction_is_zero(self):
        y = Tensor(np.ones(6))
        assert losses.dice_loss(y, y).item() == 0.0

    def test_known_value(self):
        prob = Tensor(np.array([1.0, 0.0]))
        target = Tensor(np.array([1.0, 1.0]))
        # intersection 1, sums 1 + 2, eps 1: loss = 1 - 3/4
        assert abs(losses.dice_loss(prob, target).item() - 0.25) < 1e-12

    def test_empty_target_all_zero_prediction(self):
        z = Tensor(np.zeros(8))
        # eps keeps the ratio defined: loss = 1 - eps/eps = 0
        assert losses.dice_loss(z, z).item() == 0.0


class TestTaskLoss:
    def test_averages_dice_and_bce(self):
        logit = Tensor(np.zeros(4))
        target = Tensor(np.ones(4))
        # sigmoid(0) = 0.5: dice = 1 - (2*2+1)/(2+4+1) = 2/7, bce = ln 2
        expected = (2 / 7 + math.log(2)) / 2
        assert abs(losses.task_loss(logit, target).item() - expected) < 1e-12


class TestTotalLoss:
    def test_without_aux_stages(self, rng):
        b = Tensor(rng.standard_normal((1, 1, 4, 4)))
        r = Tensor(rng.standard_normal((1, 1, 4, 4)))
        yb = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
        yr = Tensor((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
        total, parts = losses.total_loss(b, r, [], [], yb, yr)
        assert parts.l_aux == 0.0
        assert abs(parts.l_total - (parts.l_building + parts.l_road)) < 1e-9

    def test_breakdown_is_weighted_sum(self, tiny_config, rng):
        model = CrinModel(tiny_config, seed=0)
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        yb = Tensor((rng.random((1, 1, 32, 32)) > 0.7).astype(np.float32))
        yr = Tensor((rng.random((1, 1, 32, 32)) > 0.7).astype(np.float32))
        res = model.forward(x, training=True)
        total, parts = losses.total_loss(res.building_logits, res.road_logits,
                                         res.aux, model.aux_heads, yb, yr)
        assert parts.l_aux > 0.0
        expected = parts.l_building + parts.l_road + 0.1 * parts.l_aux
        assert abs(parts.l_total - expected) < 1e-5
        assert abs(total.item() - parts.l_total) < 1e-12

    def test_aux_stage_head_count_mismatch(self, rng):
        yb = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ShapeError, match="head count"):
            losses.aux_loss([object()], [], yb, yb)
