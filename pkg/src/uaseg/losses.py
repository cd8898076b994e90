"""Training objectives.

All losses return scalar graph nodes so one backward pass over the combined
objective yields gradients for both models at once. Weight maps and labels
enter as constants; probabilities are clamped to 1e-12 before every log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._engine import Tensor, as_tensor, ops
from . import adversarial, segnet
from .errors import DimensionError, EmptyBatchError, LabelError

SENTINEL = 255
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cot_max: float = 1.0
    lambda_div_max: float = 0.5
    # None = pick at train time as 10% of the epoch budget.
    ramp_epochs: int | None = None

    def validate(self) -> "LossWeights":
        if self.lambda_cot_max < 0 or self.lambda_div_max < 0:
            raise ValueError("lambda maxima must be >= 0")
        if self.ramp_epochs is not None and self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be >= 0")
        return self

    def resolved_ramp(self, total_epochs: int) -> int:
        if self.ramp_epochs is not None:
            return self.ramp_epochs
        return max(1, round(0.1 * total_epochs))


def _const_weights(w, dtype, shape) -> np.ndarray:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    return np.broadcast_to(arr.astype(dtype, copy=False), shape)


def weighted_ce(pred, labels: np.ndarray, w) -> Tensor:
    """Mean over labeled pixels of w * (-ln p[label]); sentinel pixels are
    excluded from the mean."""
    pred = as_tensor(pred)
    labels = np.asarray(labels)
    if labels.shape != (pred.shape[0],) + pred.shape[2:]:
        raise DimensionError(f"labels shape {labels.shape} does not match predictions {pred.shape}")
    mask = labels != SENTINEL
    n_labeled = int(mask.sum())
    if n_labeled == 0:
        raise EmptyBatchError("all pixels carry the sentinel label")
    if (labels[mask] >= pred.shape[1]).any():
        raise LabelError("label value >= number of classes")
    w_arr = _const_weights(w, pred.data.dtype, mask.shape)
    idx = np.where(mask, labels, 0).astype(np.int64)
    p_label = ops.take_channel(pred, idx)
    neg_logp = ops.neg(ops.log(ops.clip_min(p_label, LOG_CLAMP)))
    weighted = ops.mul(neg_logp, w_arr * mask)
    return ops.tsum(weighted) * (1.0 / n_labeled)


def js_divergence(p, q) -> Tensor:
    """Per-pixel Jensen-Shannon divergence (nats), shape (N, H, W); symmetric
    and bounded by ln 2."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"shapes differ: {p.shape} vs {q.shape}")
    m = (p + q) * 0.5
    log_m = ops.log(ops.clip_min(m, LOG_CLAMP))
    kl_pm = ops.tsum(p * (ops.log(ops.clip_min(p, LOG_CLAMP)) - log_m), axis=1)
    kl_qm = ops.tsum(q * (ops.log(ops.clip_min(q, LOG_CLAMP)) - log_m), axis=1)
    return (kl_pm + kl_qm) * 0.5


def agreement_loss(p1, p2, w) -> Tensor:
    """Mean over all pixels of w * JS(p1, p2); gradients reach both inputs."""
    js = js_divergence(p1, p2)
    w_arr = _const_weights(w, js.data.dtype, js.shape)
    return ops.tmean(ops.mul(js, w_arr))


def cross_model_ce(target, student) -> Tensor:
    """Mean over pixels of -sum_c target_c ln student_c. The target acts as a
    fixed teaching signal: it is detached, so no gradient reaches its model."""
    target = as_tensor(target).detach()
    student = as_tensor(student)
    if target.shape != student.shape:
        raise DimensionError(f"shapes differ: {target.shape} vs {student.shape}")
    log_s = ops.log(ops.clip_min(student, LOG_CLAMP))
    ce = ops.neg(ops.tsum(ops.mul(target, log_s), axis=1))
    return ops.tmean(ce)


def diversity_loss(
    model1: segnet.SegModel,
    model2: segnet.SegModel,
    images,
    labels,
    adv_cfg: adversarial.AdvConfig,
    seed: int,
    examples: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Cross-model cross-entropy on adversarial examples.

    Each model's adversarial batch (FGSM for labeled items, VAT for unlabeled
    ones) is fed to the other model, which is pushed toward the first model's
    clean prediction. Generation runs outside the graph; pass `examples` to
    reuse precomputed adversarial batches.
    """
    if examples is None:
        g1 = adversarial.generate_mixed(model1, images, labels, adv_cfg, seed)
        g2 = adversarial.generate_mixed(model2, images, labels, adv_cfg, seed + 1)
    else:
        g1, g2 = examples
    f1_clean = segnet.softmax(segnet.forward(model1, images, mode=None))
    f2_clean = segnet.softmax(segnet.forward(model2, images, mode=None))
    f2_on_g1 = segnet.softmax(segnet.forward(model2, g1, mode=None))
    f1_on_g2 = segnet.softmax(segnet.forward(model1, g2, mode=None))
    return cross_model_ce(f1_clean, f2_on_g1) + cross_model_ce(f2_clean, f1_on_g2)


def total_loss(sup, agr, div, lambda_cot: float, lambda_div: float) -> Tensor:
    """Combined objective: sup + lambda_cot * agr + lambda_div * div."""
    return as_tensor(sup) + lambda_cot * as_tensor(agr) + lambda_div * as_tensor(div)


def lambda_rampup(epoch: int, lambda_max: float, ramp_epochs: int) -> float:
    """Gaussian ramp from ~0 at epoch 0 to lambda_max at ramp_epochs."""
    if ramp_epochs <= 0:
        return lambda_max
    phase = 1.0 - min(epoch, ramp_epochs) / ramp_epochs
    return lambda_max * math.exp(-5.0 * phase * phase)
