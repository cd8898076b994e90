import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uaseg import losses, segnet
from uaseg._engine import ops
from uaseg._engine.tensor import Tensor, backward
from uaseg.adversarial import AdvConfig
from uaseg.errors import DimensionError, EmptyBatchError, LabelError
from uaseg.losses import (
    LossWeights,
    agreement_loss,
    cross_model_ce,
    diversity_loss,
    js_divergence,
    lambda_rampup,
    total_loss,
    weighted_ce,
)

SENTINEL = losses.SENTINEL


def prob_map(rng, n, k, h, w):
    raw = rng.random((n, k, h, w)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


class TestWeightedCe:
    def test_perfect_prediction_is_zero(self):
        pred = np.zeros((1, 2, 2, 2))
        pred[:, 1] = 1.0
        labels = np.ones((1, 2, 2), dtype=np.int64)
        loss = weighted_ce(Tensor(pred), labels, np.ones((1, 2, 2)))
        assert abs(loss.item()) < 1e-9

    def test_single_pixel_closed_form(self):
        pred = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
        labels = np.zeros((1, 1, 1), dtype=np.int64)
        loss = weighted_ce(Tensor(pred), labels, np.ones((1, 1, 1)))
        np.testing.assert_allclose(loss.item(), math.log(2), rtol=1e-7)
        loss2 = weighted_ce(Tensor(pred), labels, np.full((1, 1, 1), 2.0))
        np.testing.assert_allclose(loss2.item(), 2 * math.log(2), rtol=1e-7)

    def test_sentinel_pixels_excluded(self):
        pred = np.full((1, 2, 1, 2), 0.5)
        labels = np.array([[[0, SENTINEL]]], dtype=np.int64)
        loss = weighted_ce(Tensor(pred), labels, np.ones((1, 1, 2)))
        np.testing.assert_allclose(loss.item(), math.log(2), rtol=1e-7)

    def test_all_sentinel_rejected(self):
        pred = np.full((1, 2, 1, 1), 0.5)
        labels = np.full((1, 1, 1), SENTINEL, dtype=np.int64)
        with pytest.raises(EmptyBatchError):
            weighted_ce(Tensor(pred), labels, np.ones((1, 1, 1)))

    def test_label_out_of_range_rejected(self):
        pred = np.full((1, 2, 1, 1), 0.5)
        labels = np.full((1, 1, 1), 2, dtype=np.int64)
        with pytest.raises(LabelError):
            weighted_ce(Tensor(pred), labels, np.ones((1, 1, 1)))

    def test_label_shape_mismatch_rejected(self):
        pred = np.full((1, 2, 2, 2), 0.5)
        with pytest.raises(DimensionError):
            weighted_ce(Tensor(pred), np.zeros((1, 2, 3), dtype=np.int64), 1.0)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 3.0))
    def test_linear_in_weight_map(self, seed, scale):
        r = np.random.default_rng(seed)
        pred = prob_map(r, 1, 3, 2, 2)
        labels = r.integers(0, 3, (1, 2, 2))
        w = r.random((1, 2, 2))
        base = weighted_ce(Tensor(pred), labels, w).item()
        scaled = weighted_ce(Tensor(pred), labels, w * scale).item()
        np.testing.assert_allclose(scaled, base * scale, rtol=1e-6)

    def test_differentiable_wrt_pred(self, rng):
        pred = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        labels = rng.integers(0, 3, (1, 2, 2))
        grads = backward(weighted_ce(pred, labels, np.ones((1, 2, 2))))
        assert grads[pred].shape == pred.shape
        assert np.any(grads[pred] != 0)

    def test_nonnegative(self, rng):
        pred = prob_map(rng, 2, 4, 3, 3)
        labels = rng.integers(0, 4, (2, 3, 3))
        assert weighted_ce(Tensor(pred), labels, rng.random((2, 3, 3))).item() >= 0


class TestJsDivergence:
    def test_zero_iff_equal(self, rng):
        p = prob_map(rng, 1, 3, 2, 2)
        np.testing.assert_allclose(js_divergence(Tensor(p), Tensor(p.copy())).data, 0.0, atol=1e-9)

    def test_symmetric(self, rng):
        p, q = prob_map(rng, 1, 3, 2, 2), prob_map(rng, 1, 3, 2, 2)
        np.testing.assert_allclose(
            js_divergence(Tensor(p), Tensor(q)).data,
            js_divergence(Tensor(q), Tensor(p)).data, atol=1e-12)

    def test_max_on_disjoint_support(self):
        p = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        q = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(js_divergence(Tensor(p), Tensor(q)).data, math.log(2), rtol=1e-6)

    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounds(self, seed):
        r = np.random.default_rng(seed)
        p, q = prob_map(r, 2, 4, 2, 2), prob_map(r, 2, 4, 2, 2)
        js = js_divergence(Tensor(p), Tensor(q)).data
        assert (js >= -1e-12).all()
        assert (js <= math.log(2) + 1e-9).all()

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(DimensionError):
            js_divergence(Tensor(prob_map(rng, 1, 2, 2, 2)), Tensor(prob_map(rng, 1, 3, 2, 2)))


class TestAgreementLoss:
    def test_weighted_mean_of_js(self, rng):
        p, q = prob_map(rng, 1, 3, 2, 2), prob_map(rng, 1, 3, 2, 2)
        w = rng.random((1, 2, 2))
        expect = float((js_divergence(Tensor(p), Tensor(q)).data * w).mean())
        np.testing.assert_allclose(agreement_loss(Tensor(p), Tensor(q), w).item(), expect, rtol=1e-6)

    def test_gradients_reach_both_inputs(self, rng):
        p = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        q = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        grads = backward(agreement_loss(p, q, np.ones((1, 2, 2))))
        assert p in grads and q in grads


class TestCrossModelCe:
    @given(st.integers(0, 2 ** 32 - 1))
    def test_gibbs_inequality(self, seed):
        r = np.random.default_rng(seed)
        t, s = prob_map(r, 1, 4, 2, 2), prob_map(r, 1, 4, 2, 2)
        ce = cross_model_ce(Tensor(t), Tensor(s)).item()
        entropy = float(-(t * np.log(t)).sum(axis=1).mean())
        assert ce >= entropy - 1e-9

    def test_equality_iff_student_matches(self, rng):
        t = prob_map(rng, 1, 4, 2, 2)
        ce = cross_model_ce(Tensor(t), Tensor(t.copy())).item()
        entropy = float(-(t * np.log(t)).sum(axis=1).mean())
        np.testing.assert_allclose(ce, entropy, rtol=1e-9)

    def test_teacher_receives_no_gradient(self, rng):
        t = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        s = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        grads = backward(cross_model_ce(t, s))
        assert t not in grads
        assert s in grads

    def test_perturbing_teacher_changes_value_only(self, rng):
        t = prob_map(rng, 1, 3, 2, 2)
        s = Tensor(prob_map(rng, 1, 3, 2, 2), requires_grad=True)
        g1 = backward(cross_model_ce(Tensor(t), s))[s]
        t2 = prob_map(rng, 1, 3, 2, 2)
        loss_a = cross_model_ce(Tensor(t), s).item()
        loss_b = cross_model_ce(Tensor(t2), s).item()
        assert loss_a != loss_b
        # the student gradient direction depends on the teacher, but the
        # teacher itself never appears in the gradient set
        assert g1.shape == s.shape


class TestDiversityLoss:
    def test_teachers_excluded_from_gradient(self, rng):
        cfg = segnet.SegNetConfig(num_classes=3, base_channels=2, depth=1)
        m1 = segnet.init_model(cfg, seed=1).astype(np.float64)
        m2 = segnet.init_model(cfg, seed=2).astype(np.float64)
        images = rng.random((2, 4, 4))
        labels = np.stack([
            rng.integers(0, 3, (4, 4)),
            np.full((4, 4), SENTINEL),
        ]).astype(np.int64)
        loss = diversity_loss(m1, m2, images, labels, AdvConfig(), seed=3)
        grads = backward(loss)
        g1 = segnet.extract_param_grads(m1, grads)
        g2 = segnet.extract_param_grads(m2, grads)
        assert any(np.any(g != 0) for g in g1.values())
        assert any(np.any(g != 0) for g in g2.values())

    def test_deterministic_given_seed(self, rng):
        cfg = segnet.SegNetConfig(num_classes=3, base_channels=2, depth=1)
        m1 = segnet.init_model(cfg, seed=1)
        m2 = segnet.init_model(cfg, seed=2)
        images = rng.random((1, 4, 4)).astype(np.float32)
        labels = np.full((1, 4, 4), SENTINEL, dtype=np.int64)
        a = diversity_loss(m1, m2, images, labels, AdvConfig(), seed=3).item()
        b = diversity_loss(m1, m2, images, labels, AdvConfig(), seed=3).item()
        assert a == b


class TestTotalLossAndRamp:
    def test_decomposition(self):
        total = total_loss(Tensor(np.float64(1.5)), Tensor(np.float64(0.25)),
                           Tensor(np.float64(2.0)), 1.0, 0.5)
        np.testing.assert_allclose(total.item(), 1.5 + 0.25 + 1.0, rtol=1e-12)

    def test_ramp_reaches_max_and_holds(self):
        assert lambda_rampup(4, 1.0, 4) == 1.0
        assert lambda_rampup(9, 1.0, 4) == 1.0

    def test_ramp_start_value(self):
        np.testing.assert_allclose(lambda_rampup(0, 2.0, 10), 2.0 * math.exp(-5.0), rtol=1e-12)

    def test_ramp_zero_epochs_is_constant(self):
        assert lambda_rampup(0, 0.7, 0) == 0.7

    @given(st.integers(0, 60))
    def test_ramp_nondecreasing(self, epoch):
        r = 10
        assert lambda_rampup(epoch + 1, 1.0, r) >= lambda_rampup(epoch, 1.0, r) - 1e-15

    def test_resolved_ramp_default_is_tenth(self):
        assert LossWeights().resolved_ramp(40) == 4
        assert LossWeights().resolved_ramp(5) == 1
        assert LossWeights(ramp_epochs=7).resolved_ramp(40) == 7
