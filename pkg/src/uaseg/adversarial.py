"""Adversarial example generation.

FGSM perturbs labeled images along the sign of the supervised-loss input
gradient; VAT perturbs unlabeled images along the direction that most
increases the KL divergence of the model's own prediction, found by power
iteration. Both run the model with dropout off, never mutate parameters, and
return plain arrays (the perturbation is a constant for later losses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._engine import Tensor, no_grad, ops
from . import segnet
from .errors import ConfigurationError, LabelError
from .seeding import rng_from

SENTINEL = 255
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class AdvConfig:
    eps_fgsm: float = 0.03
    eps_vat: float = 10.0
    vat_xi: float = 10.0
    vat_power_iters: int = 1
    clamp_to_unit: bool = True

    def validate(self) -> "AdvConfig":
        if self.eps_fgsm <= 0 or self.eps_vat <= 0 or self.vat_xi <= 0:
            raise ConfigurationError("eps and xi values must be > 0")
        if self.vat_power_iters < 1:
            raise ConfigurationError("vat_power_iters must be >= 1")
        return self


def _to_4d(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if arr.ndim == 3:
        return arr[:, None, :, :], True
    return arr, False


def _ce_on_labeled(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Plain cross-entropy over non-sentinel pixels (mean)."""
    mask = labels != SENTINEL
    idx = np.where(mask, labels, 0).astype(np.int64)
    p = ops.take_channel(probs, idx)
    neg_logp = ops.neg(ops.log(ops.clip_min(p, LOG_CLAMP)))
    masked = ops.mul(neg_logp, mask.astype(probs.data.dtype))
    return ops.tsum(masked) * (1.0 / int(mask.sum()))


def fgsm(model: segnet.SegModel, x, y, eps: float, clamp_to_unit: bool = True) -> np.ndarray:
    """x + eps * sign of the input gradient of the supervised loss."""
    x4, squeezed = _to_4d(x)
    y = np.asarray(y)
    labeled = y != SENTINEL
    if not labeled.any():
        raise LabelError("fgsm needs at least one labeled pixel")
    if (y[labeled] >= model.config.num_classes).any():
        raise LabelError("label value >= num_classes")
    xt = Tensor(x4.astype(np.float32, copy=False), requires_grad=True)
    probs = segnet.softmax(segnet.forward(model, xt, mode=None))
    g = segnet.input_gradient(xt, _ce_on_labeled(probs, y))
    adv = x4.astype(np.float32) + np.float32(eps) * np.sign(g, dtype=np.float32)
    if clamp_to_unit:
        adv = np.clip(adv, 0.0, 1.0)
    return adv[:, 0] if squeezed else adv


def _normalize_rows(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image L2 normalization over all pixels; flags rows with ~zero norm."""
    norms = np.sqrt(np.sum(d.astype(np.float64) ** 2, axis=(1, 2, 3), keepdims=True))
    ok = norms[:, 0, 0, 0] > 1e-30
    safe = np.where(norms > 1e-30, norms, 1.0)
    return d / safe, ok


def vat_perturb(model: segnet.SegModel, x, cfg: AdvConfig, seed: int) -> np.ndarray:
    """x + eps_vat * d, d found by power iteration on the prediction KL.

    Images whose KL gradient vanishes keep their previous direction (the
    seeded random field on the first iteration), so the perturbation always
    has per-image L2 norm eps_vat before clamping.
    """
    cfg.validate()
    x4, squeezed = _to_4d(x)
    x4 = x4.astype(np.float32, copy=False)
    d, _ = _normalize_rows(rng_from(seed).standard_normal(x4.shape))
    with no_grad():
        p_clean = segnet.softmax(segnet.forward(model, x4, mode=None)).data
    log_p_clean = np.log(np.maximum(p_clean, LOG_CLAMP))
    base = Tensor(x4)
    for _ in range(cfg.vat_power_iters):
        r = Tensor((cfg.vat_xi * d).astype(np.float32), requires_grad=True)
        probs = segnet.softmax(segnet.forward(model, ops.add(base, r), mode=None))
        log_p_r = ops.log(ops.clip_min(probs, LOG_CLAMP))
        per_pixel_kl = ops.tsum(ops.mul(Tensor(p_clean), ops.sub(Tensor(log_p_clean), log_p_r)), axis=1)
        g = segnet.input_gradient(r, ops.tmean(per_pixel_kl))
        g_unit, ok = _normalize_rows(g)
        d = np.where(ok[:, None, None, None], g_unit, d)
    adv = x4.astype(np.float64) + cfg.eps_vat * d
    if cfg.clamp_to_unit:
        adv = np.clip(adv, 0.0, 1.0)
    adv = adv.astype(np.float32)
    return adv[:, 0] if squeezed else adv


def generate_mixed(model: segnet.SegModel, x, labels, cfg: AdvConfig, seed: int) -> np.ndarray:
    """Adversarial batch routing each item by annotation: FGSM where the item
    has labeled pixels, VAT where it has none."""
    x4, squeezed = _to_4d(x)
    labels = np.asarray(labels)
    has_labels = (labels != SENTINEL).any(axis=(1, 2))
    adv = np.empty_like(x4, dtype=np.float32)
    if has_labels.any():
        adv[has_labels] = fgsm(model, x4[has_labels], labels[has_labels],
                               cfg.eps_fgsm, cfg.clamp_to_unit)
    if (~has_labels).any():
        adv[~has_labels] = vat_perturb(model, x4[~has_labels], cfg, seed)
    return adv[:, 0] if squeezed else adv
