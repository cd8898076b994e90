import numpy as np
import pytest

from uaseg import adversarial, segnet
from uaseg._engine.tensor import Tensor
from uaseg._engine import ops
from uaseg.adversarial import AdvConfig, fgsm, generate_mixed, vat_perturb
from uaseg.errors import ConfigurationError, LabelError

SENTINEL = adversarial.SENTINEL


@pytest.fixture
def model():
    return segnet.init_model(segnet.SegNetConfig(num_classes=3), seed=0)


class TestFgsm:
    def test_linf_bound_and_equality_off_saturation(self, model, rng):
        x = rng.uniform(0.2, 0.8, (2, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, (2, 8, 8))
        adv = fgsm(model, x, y, eps=0.03)
        delta = np.abs(adv - x)
        assert delta.max() <= 0.03 + 1e-7
        # with x in [0.2, 0.8] the clamp never saturates, so every moved
        # pixel moved by exactly eps
        moved = delta > 0
        np.testing.assert_allclose(delta[moved], 0.03, rtol=1e-5)
        assert moved.mean() > 0.5

    def test_clamped_to_unit_range(self, model, rng):
        x = rng.uniform(0.0, 1.0, (1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, (1, 8, 8))
        adv = fgsm(model, x, y, eps=0.5)
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_unclamped_keeps_full_step(self, model):
        x = np.zeros((1, 8, 8), dtype=np.float32)
        y = np.zeros((1, 8, 8), dtype=np.int64)
        adv = fgsm(model, x, y, eps=0.25, clamp_to_unit=False)
        assert (np.abs(adv) > 0.2).any()

    def test_increases_ce_most_of_the_time(self, model, rng):
        up = 0
        trials = 30
        for _ in range(trials):
            x = rng.uniform(0.1, 0.9, (1, 8, 8)).astype(np.float32)
            y = rng.integers(0, 3, (1, 8, 8))
            adv = fgsm(model, x, y, eps=0.03)
            def ce(img):
                probs = segnet.softmax(segnet.forward(model, img))
                return adversarial._ce_on_labeled(probs, y).item()
            if ce(adv) > ce(x):
                up += 1
        assert up >= 0.9 * trials

    def test_no_labeled_pixels_rejected(self, model):
        x = np.zeros((1, 8, 8), dtype=np.float32)
        y = np.full((1, 8, 8), SENTINEL, dtype=np.int64)
        with pytest.raises(LabelError):
            fgsm(model, x, y, eps=0.03)

    def test_label_out_of_range_rejected(self, model):
        x = np.zeros((1, 8, 8), dtype=np.float32)
        y = np.full((1, 8, 8), 3, dtype=np.int64)
        with pytest.raises(LabelError):
            fgsm(model, x, y, eps=0.03)


class TestVat:
    def test_l2_norm_before_clamp(self, model, rng):
        x = rng.uniform(0.2, 0.8, (3, 8, 8)).astype(np.float32)
        cfg = AdvConfig(eps_vat=2.5, clamp_to_unit=False)
        adv = vat_perturb(model, x, cfg, seed=7)
        norms = np.sqrt(((adv.astype(np.float64) - x) ** 2).sum(axis=(1, 2)))
        np.testing.assert_allclose(norms, 2.5, atol=1e-5)

    def test_clamped_range(self, model, rng):
        x = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        adv = vat_perturb(model, x, AdvConfig(), seed=7)
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_deterministic_given_seed(self, model, rng):
        x = rng.uniform(0, 1, (2, 8, 8)).astype(np.float32)
        a = vat_perturb(model, x, AdvConfig(), seed=3)
        b = vat_perturb(model, x, AdvConfig(), seed=3)
        c = vat_perturb(model, x, AdvConfig(), seed=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_power_iteration_moves_toward_sensitive_direction(self, model, rng):
        # more iterations must not reduce the induced KL (statistically)
        x = rng.uniform(0.2, 0.8, (4, 8, 8)).astype(np.float32)

        def kl_after(cfg):
            adv = vat_perturb(model, x, cfg, seed=11)
            p = segnet.softmax(segnet.forward(model, x)).data
            q = segnet.softmax(segnet.forward(model, adv)).data
            return float((p * (np.log(np.maximum(p, 1e-12)) - np.log(np.maximum(q, 1e-12)))).sum(axis=1).mean())

        base = AdvConfig(eps_vat=1.0, clamp_to_unit=False, vat_power_iters=1)
        more = AdvConfig(eps_vat=1.0, clamp_to_unit=False, vat_power_iters=3)
        assert kl_after(more) >= 0.5 * kl_after(base)

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            AdvConfig(eps_fgsm=0.0).validate()
        with pytest.raises(ConfigurationError):
            AdvConfig(vat_power_iters=0).validate()


class TestGenerateMixed:
    def test_routes_by_annotation(self, model, rng):
        x = rng.uniform(0.2, 0.8, (2, 8, 8)).astype(np.float32)
        labels = np.stack([
            rng.integers(0, 3, (8, 8)),
            np.full((8, 8), SENTINEL),
        ]).astype(np.int64)
        cfg = AdvConfig(eps_fgsm=0.03, eps_vat=1.0, clamp_to_unit=False)
        adv = generate_mixed(model, x, labels, cfg, seed=5)
        d0 = np.abs(adv[0] - x[0])
        moved = d0 > 0
        np.testing.assert_allclose(d0[moved], 0.03, rtol=1e-5)
        d1 = float(np.sqrt(((adv[1].astype(np.float64) - x[1]) ** 2).sum()))
        np.testing.assert_allclose(d1, 1.0, atol=1e-5)

    def test_batch_and_single_item_routing_agree(self, model, rng):
        x = rng.uniform(0.2, 0.8, (2, 8, 8)).astype(np.float32)
        labels = np.stack([
            rng.integers(0, 3, (8, 8)),
            np.full((8, 8), SENTINEL),
        ]).astype(np.int64)
        cfg = AdvConfig(clamp_to_unit=False)
        adv = generate_mixed(model, x, labels, cfg, seed=5)
        lone_fgsm = fgsm(model, x[:1], labels[:1], cfg.eps_fgsm, cfg.clamp_to_unit)
        np.testing.assert_array_equal(adv[0], lone_fgsm[0])
