"""Monte Carlo dropout uncertainty: sampling, predictive entropy, the weight
maps derived from it, activation scheduling, and heatmap export.

Uncertainty maps are plain arrays, never graph nodes: gradients must not flow
through the entropy estimate into the parameters, and the weight maps built
here enter the losses as constants.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ._engine import Tensor, no_grad
from . import segnet
from .errors import ConfigurationError, DimensionError

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class McConfig:
    base_seed: int
    T: int = 8

    def validate(self) -> "McConfig":
        if self.T < 2:
            raise ConfigurationError(f"T must be >= 2, got {self.T}")
        return self


@dataclass(frozen=True)
class UncertaintySchedule:
    sup_start_epoch: int = 0
    unsup_start_epoch: int = 20

    def validate(self) -> "UncertaintySchedule":
        if self.sup_start_epoch < 0 or self.unsup_start_epoch < 0:
            raise ConfigurationError("schedule epochs must be >= 0")
        return self


MODE_LITERAL = "literal"
MODE_RECTIFIED = "rectified"


@dataclass(frozen=True)
class UnsupNormConfig:
    beta: float = 0.7
    c_norm: float = 2.0
    mode: str = MODE_RECTIFIED

    def validate(self) -> "UnsupNormConfig":
        if self.beta <= 0 or self.c_norm <= 0:
            raise ConfigurationError("beta and c_norm must be > 0")
        if self.mode not in (MODE_LITERAL, MODE_RECTIFIED):
            raise ConfigurationError(f"mode must be literal or rectified, got {self.mode!r}")
        return self


def _as_array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def mc_sample(model: segnet.SegModel, images, cfg: McConfig) -> list[np.ndarray]:
    """T stochastic softmax maps; pass t is seeded with base_seed + t.

    Forward-only: no graph is built and no parameter is touched.
    """
    cfg.validate()
    out = []
    with no_grad():
        for t in range(cfg.T):
            logits = segnet.forward(model, images, mode=cfg.base_seed + t)
            out.append(segnet.softmax(logits).data)
    return out


def predictive_entropy(samples: list[np.ndarray]) -> np.ndarray:
    """Entropy of the mean softmax across passes, in nats, (N, H, W).

    0 * ln 0 is treated as 0; output lies in [0, ln K].
    """
    if len(samples) < 2:
        raise DimensionError("need at least 2 samples")
    arrs = [_as_array(s) for s in samples]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise DimensionError("sample shapes differ")
    mu = np.zeros(shape, dtype=np.float64)
    for a in arrs:
        mu += a
    mu /= len(arrs)
    u = -np.sum(mu * np.log(np.maximum(mu, LOG_CLAMP)), axis=1)
    return np.maximum(u, 0.0).astype(np.float32)


def sup_weight(u: np.ndarray, active: bool, floor: float = 0.1) -> np.ndarray:
    """Supervised-loss weights: entropy clamped from below, or all-ones when
    the supervised uncertainty stage is off."""
    if floor < 0:
        raise ConfigurationError(f"floor must be >= 0, got {floor}")
    u = np.asarray(u)
    if not active:
        return np.ones_like(u)
    return np.maximum(u, u.dtype.type(floor))


def unsup_weight(u1, u2, cfg: UnsupNormConfig, active: bool) -> np.ndarray:
    """Agreement-loss weights from the two models' uncertainty maps.

    literal mode applies w = -beta * (mean + c_norm) verbatim; rectified mode
    (default) applies w = max(0, beta * (c_norm - mean)) so that pixels both
    models are confident about carry the most weight.
    """
    cfg.validate()
    u1, u2 = np.asarray(u1), np.asarray(u2)
    if u1.shape != u2.shape:
        raise DimensionError(f"uncertainty map shapes differ: {u1.shape} vs {u2.shape}")
    if not active:
        return np.ones_like(u1)
    ubar = 0.5 * (u1 + u2)
    if cfg.mode == MODE_LITERAL:
        return (-cfg.beta * (ubar + cfg.c_norm)).astype(u1.dtype)
    return np.maximum(cfg.beta * (cfg.c_norm - ubar), 0.0).astype(u1.dtype)


def schedule_active(epoch: int, sched: UncertaintySchedule) -> tuple[bool, bool]:
    """(supervised stage active, unsupervised stage active) at this epoch."""
    return (epoch >= sched.sup_start_epoch, epoch >= sched.unsup_start_epoch)


def export_heatmap(u, k_classes: int, out_dir, model_idx: int, epoch: int) -> list[str]:
    """Write one 8-bit binary PGM per batch item, scaled so ln K maps to 255.

    Files are named uncert_{model}_{epoch}_{index}.pgm; returns the paths.
    """
    u = np.asarray(u)
    if u.ndim == 2:
        u = u[None]
    scale = 255.0 / math.log(k_classes)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for idx in range(u.shape[0]):
        # round half up, then clamp
        pix = np.floor(u[idx].astype(np.float64) * scale + 0.5)
        pix = np.clip(pix, 0, 255).astype(np.uint8)
        h, w = pix.shape
        path = os.path.join(out_dir, f"uncert_{model_idx}_{epoch}_{idx}.pgm")
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(pix.tobytes())
        paths.append(path)
    return paths
