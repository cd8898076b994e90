"""Co-training loop for a pair of segmentation models.

Each iteration builds one scalar objective (both supervised terms plus the
weighted agreement and adversarial diversity terms), runs a single backward
pass, and applies one Adam step per model. Every stochastic draw is keyed by
(stream, absolute epoch, iteration, model, site) instead of consuming a
shared generator, so a resumed run replays the identical trajectory and
skipping an inactive term never shifts later randomness.

Method variants:
  part          one model per labeled subset, supervised only
  independent   both models on the union of labeled subsets, supervised only
  dct           co-training without uncertainty weighting
  ours          co-training with supervised and agreement uncertainty weights
  sup-unc       uncertainty on the supervised term only
  unsup-unc     uncertainty on the agreement term only
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import segnet
from ._engine import backward, no_grad
from .adversarial import AdvConfig
from .data import SENTINEL, DatasetBundle
from .errors import ConfigurationError, FormatError, NumericError
from .losses import (
    LossWeights,
    agreement_loss,
    diversity_loss,
    lambda_rampup,
    total_loss,
    weighted_ce,
)
from .metrics import MetricsReport, avg_individual, ensemble_vote, per_class_report
from .seeding import (
    STREAM_DIVERSITY,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_MC,
    STREAM_MC_EVAL,
    STREAM_SHUFFLE_LABELED,
    STREAM_SHUFFLE_UNLABELED,
    STREAM_VAT,
    derive_seed,
    derived_rng,
)
from .uncertainty import (
    McConfig,
    UncertaintySchedule,
    UnsupNormConfig,
    export_heatmap,
    mc_sample,
    predictive_entropy,
    schedule_active,
    sup_weight,
    unsup_weight,
)

METHOD_PART = "part"
METHOD_INDEPENDENT = "independent"
METHOD_DCT = "dct"
METHOD_OURS = "ours"
METHOD_SUP_UNC = "sup-unc"
METHOD_UNSUP_UNC = "unsup-unc"
METHODS = (METHOD_PART, METHOD_INDEPENDENT, METHOD_DCT, METHOD_OURS,
           METHOD_SUP_UNC, METHOD_UNSUP_UNC)

_COTRAINING = frozenset({METHOD_DCT, METHOD_OURS, METHOD_SUP_UNC, METHOD_UNSUP_UNC})

OPTIM_MAGIC = b"UASEGOPT"
OPTIM_VERSION = 1
STATE_NAME = "state.json"

LOSSES_CSV = "losses.csv"
REPORT_JSON = "report.json"
HEATMAP_DIR = "heatmaps"
CHECKPOINT_DIR = "checkpoints"

# Heatmaps are a debugging aid; exporting the whole test set every interval
# would dominate small runs, so only the first few items are written.
_HEATMAP_ITEMS = 4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    method: str = METHOD_OURS
    global_seed: int = 0
    batch_size_labeled: int = 4
    batch_size_unlabeled: int = 10
    lr: float = 1e-3
    lr_decay_every: int = 30
    heatmap_every: int = 0
    checkpoint_every: int = 0
    model: segnet.SegNetConfig = field(default_factory=lambda: segnet.SegNetConfig(num_classes=4))
    mc: McConfig = field(default_factory=lambda: McConfig(base_seed=0))
    schedule: UncertaintySchedule = field(default_factory=UncertaintySchedule)
    unsup_norm: UnsupNormConfig = field(default_factory=UnsupNormConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adv: AdvConfig = field(default_factory=AdvConfig)

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.lr_decay_every < 1:
            raise ConfigurationError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.heatmap_every < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("heatmap_every and checkpoint_every must be >= 0")
        self.model.validate()
        self.mc.validate()
        self.schedule.validate()
        self.unsup_norm.validate()
        self.loss_weights.validate()
        self.adv.validate()
        return self


@dataclass
class EpochLog:
    epoch: int
    lr: float
    lambda_cot: float
    lambda_div: float
    sup: tuple[float, float]
    agr: float
    div: float
    total: tuple[float, float]
    unsup_weight_mean: float
    mean_test_entropy: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "lambda_cot": self.lambda_cot,
            "lambda_div": self.lambda_div,
            "sup": list(self.sup),
            "agr": self.agr,
            "div": self.div,
            "total": list(self.total),
            "unsup_weight_mean": self.unsup_weight_mean,
            "mean_test_entropy": self.mean_test_entropy,
        }


@dataclass
class RunReport:
    epochs: list[EpochLog]
    final_avg: MetricsReport
    final_vot: MetricsReport
    checkpoints: list[str]

    def to_dict(self) -> dict:
        return {
            "epochs": [e.to_dict() for e in self.epochs],
            "final": {"avg": self.final_avg.to_dict(), "vot": self.final_vot.to_dict()},
            "checkpoints": list(self.checkpoints),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    imgs = np.stack([p[0] for p in pairs]).astype(np.float32)
    masks = np.stack([p[1] for p in pairs]).astype(np.uint8)
    return imgs, masks


def _labeled_order(gs: int, model_idx: int, epoch: int, pool_size: int, count: int) -> np.ndarray:
    """Indices for `count` draws: chained per-epoch permutations, so every pool
    item appears once per cycle before any repeats."""
    out = np.empty(count, dtype=np.int64)
    filled = 0
    cycle = 0
    while filled < count:
        perm = derived_rng(gs, STREAM_SHUFFLE_LABELED, model_idx, epoch, cycle).permutation(pool_size)
        take = min(pool_size, count - filled)
        out[filled:filled + take] = perm[:take]
        filled += take
        cycle += 1
    return out


def _ensure_finite(name: str, value: float, epoch: int, it: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name} loss ({value}) at epoch {epoch}, iteration {it}")
    return value


def evaluate(models, test, num_classes: int) -> tuple[MetricsReport, MetricsReport]:
    """Final-model test metrics, deterministic forward (no dropout).

    Returns (avg, vot): per-model metrics averaged, and metrics of the soft
    vote (argmax of the mean probability map).
    """
    if not test:
        raise ConfigurationError("test set is empty")
    imgs, masks = _stack_pairs(test)
    with no_grad():
        probs = [segnet.softmax(segnet.forward(m, imgs, mode=None)).data for m in models]
    model_reports = []
    for pm in probs:
        preds = np.argmax(pm, axis=1).astype(np.uint8)
        reps = [per_class_report(preds[j], masks[j], num_classes) for j in range(len(test))]
        model_reports.append(avg_individual(reps))
    avg = avg_individual(model_reports, mode="avg")
    voted = ensemble_vote(probs[0], probs[1])
    vot_reps = [per_class_report(voted[j], masks[j], num_classes) for j in range(len(test))]
    vot = avg_individual(vot_reps, mode="vot")
    return avg, vot


def save_checkpoint(models, states, next_epoch: int, cfg: TrainConfig, path) -> None:
    """Write a checkpoint directory: one model file and one optimizer file per
    model plus a small JSON state record."""
    os.makedirs(path, exist_ok=True)
    for i, (model, state) in enumerate(zip(models, states), start=1):
        segnet.save_model(model, os.path.join(path, f"model_{i}.ckpt"))
        _save_optim(state, os.path.join(path, f"optim_{i}.bin"))
    record = {
        "format": "uaseg-checkpoint",
        "version": 1,
        "epoch": next_epoch,
        "global_seed": cfg.global_seed,
        "method": cfg.method,
    }
    with open(os.path.join(path, STATE_NAME), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[list[segnet.SegModel], list[segnet.AdamState], int, dict]:
    state_path = os.path.join(path, STATE_NAME)
    try:
        with open(state_path) as f:
            record = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{path}: not a checkpoint directory ({STATE_NAME} missing)")
    except json.JSONDecodeError as e:
        raise FormatError(f"{state_path}: invalid JSON: {e}")
    if record.get("format") != "uaseg-checkpoint":
        raise FormatError(f"{state_path}: unrecognized state record")
    models = []
    states = []
    for i in (1, 2):
        model = segnet.load_model(os.path.join(path, f"model_{i}.ckpt"))
        models.append(model)
        states.append(_load_optim(os.path.join(path, f"optim_{i}.bin"), model))
    return models, states, int(record["epoch"]), record


def _save_optim(state: segnet.AdamState, path) -> None:
    out = bytearray()
    out += OPTIM_MAGIC
    out += struct.pack("<I", OPTIM_VERSION)
    out += struct.pack("<I", state.t)
    tensors = {f"m.{k}": v for k, v in state.m.items()}
    tensors.update({f"v.{k}": v for k, v in state.v.items()})
    segnet._write_tensors(out, tensors)
    with open(path, "wb") as f:
        f.write(bytes(out))


def _load_optim(path, model: segnet.SegModel) -> segnet.AdamState:
    with open(path, "rb") as f:
        blob = f.read()
    r = segnet._Reader(blob, path)
    magic = r.take(len(OPTIM_MAGIC), "magic")
    if magic != OPTIM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    version = r.u32("version")
    if version != OPTIM_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", len(OPTIM_MAGIC))
    t = r.u32("step count")
    tensors = segnet._read_tensors(r)
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes", r.off)
    expected = sorted([f"m.{k}" for k in model.params] + [f"v.{k}" for k in model.params])
    if sorted(tensors) != expected:
        raise FormatError(f"{path}: optimizer tensors do not match the model parameters")
    m = {k: tensors[f"m.{k}"] for k in model.params}
    v = {k: tensors[f"v.{k}"] for k in model.params}
    for k, p in model.params.items():
        if m[k].shape != p.data.shape or v[k].shape != p.data.shape:
            raise FormatError(f"{path}: optimizer tensor shape mismatch for {k!r}")
    return segnet.AdamState(m=m, v=v, t=t)


def train(
    cfg: TrainConfig,
    bundle: DatasetBundle,
    out_dir=None,
    resume_from=None,
) -> RunReport:
    """Run the configured method on a dataset bundle and return the report.

    With `out_dir`, also writes losses.csv, report.json, periodic uncertainty
    heatmaps, and checkpoint directories. `resume_from` names a checkpoint
    directory written by a run with the same config; training continues from
    its recorded epoch and reproduces the uninterrupted trajectory.
    """
    cfg.validate()
    bundle.validate()
    if cfg.model.num_classes != bundle.num_classes:
        raise ConfigurationError(
            f"model num_classes ({cfg.model.num_classes}) must match the dataset ({bundle.num_classes})")

    co = cfg.method in _COTRAINING
    use_sup_unc = cfg.method in (METHOD_OURS, METHOD_SUP_UNC)
    use_unsup_unc = cfg.method in (METHOD_OURS, METHOD_UNSUP_UNC)

    if not bundle.labeled_1 or not bundle.labeled_2:
        raise ConfigurationError("both labeled subsets must be non-empty")
    if cfg.method == METHOD_INDEPENDENT:
        union = bundle.labeled_1 + bundle.labeled_2
        pools = (union, union)
    else:
        pools = (bundle.labeled_1, bundle.labeled_2)
    lab = [_stack_pairs(p) for p in pools]
    all_lab_imgs, all_lab_masks = _stack_pairs(bundle.labeled_1 + bundle.labeled_2)

    n_u = len(bundle.unlabeled)
    if co and n_u == 0:
        raise ConfigurationError(f"method {cfg.method!r} requires unlabeled images")
    unl = np.stack(bundle.unlabeled).astype(np.float32) if n_u else None
    if not bundle.test:
        raise ConfigurationError("test set is empty")
    test_imgs = np.stack([p[0] for p in bundle.test]).astype(np.float32)

    if n_u:
        iterations = max(1, -(-n_u // cfg.batch_size_unlabeled))
    else:
        iterations = max(1, -(-max(len(p) for p in pools) // cfg.batch_size_labeled))

    gs = cfg.global_seed
    if resume_from is not None:
        models, states, start_epoch, record = load_checkpoint(resume_from)
        if record.get("global_seed") != gs or record.get("method") != cfg.method:
            raise ConfigurationError(
                "checkpoint was written by a different run "
                f"(seed {record.get('global_seed')}, method {record.get('method')!r})")
        for m in models:
            if m.config != cfg.model:
                raise ConfigurationError("checkpoint model config does not match")
        if start_epoch >= cfg.epochs:
            raise ConfigurationError(
                f"checkpoint is already at epoch {start_epoch} of {cfg.epochs}")
    else:
        models = [segnet.init_model(cfg.model, derive_seed(gs, STREAM_INIT, i)) for i in (1, 2)]
        states = [segnet.AdamState.initial(m) for m in models]
        start_epoch = 0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        # Fixed layout: both directories exist even when their features are off.
        os.makedirs(os.path.join(out_dir, HEATMAP_DIR), exist_ok=True)
        os.makedirs(os.path.join(out_dir, CHECKPOINT_DIR), exist_ok=True)

    ramp = cfg.loss_weights.resolved_ramp(cfg.epochs)
    bs_l = cfg.batch_size_labeled
    bs_u = cfg.batch_size_unlabeled
    epoch_logs: list[EpochLog] = []
    ckpt_paths: list[str] = []

    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr * (0.1 ** (epoch // cfg.lr_decay_every))
        lam_cot = lambda_rampup(epoch, cfg.loss_weights.lambda_cot_max, ramp) if co else 0.0
        lam_div = lambda_rampup(epoch, cfg.loss_weights.lambda_div_max, ramp) if co else 0.0
        sup_sched, unsup_sched = schedule_active(epoch, cfg.schedule)
        sup_on = use_sup_unc and sup_sched
        unsup_on = use_unsup_unc and unsup_sched

        order = [_labeled_order(gs, i, epoch, len(pools[i]), iterations * bs_l) for i in (0, 1)]
        u_order = derived_rng(gs, STREAM_SHUFFLE_UNLABELED, epoch).permutation(n_u) if n_u else None

        acc = {"sup0": 0.0, "sup1": 0.0, "agr": 0.0, "div": 0.0,
               "tot0": 0.0, "tot1": 0.0, "wmean": 0.0}
        for it in range(iterations):
            sup_losses = []
            for i in (0, 1):
                sl = order[i][it * bs_l:(it + 1) * bs_l]
                xb, yb = lab[i][0][sl], lab[i][1][sl]
                if sup_on:
                    mc_cfg = McConfig(
                        base_seed=derive_seed(gs, STREAM_MC, cfg.mc.base_seed, epoch, it, i, 0),
                        T=cfg.mc.T)
                    u = predictive_entropy(mc_sample(models[i], xb, mc_cfg))
                    w = sup_weight(u, True)
                else:
                    w = 1.0
                probs = segnet.softmax(segnet.forward(
                    models[i], xb, mode=derive_seed(gs, STREAM_DROPOUT, epoch, it, i, 0)))
                sup_losses.append(weighted_ce(probs, yb, w))
            sup_v = [_ensure_finite(f"sup_{i + 1}", float(s.data), epoch, it)
                     for i, s in enumerate(sup_losses)]

            if co:
                ub = unl[u_order[it * bs_u:(it + 1) * bs_u]]
                p = [segnet.softmax(segnet.forward(
                    models[i], ub, mode=derive_seed(gs, STREAM_DROPOUT, epoch, it, i, 1)))
                    for i in (0, 1)]
                if unsup_on:
                    us = []
                    for i in (0, 1):
                        mc_cfg = McConfig(
                            base_seed=derive_seed(gs, STREAM_MC, cfg.mc.base_seed, epoch, it, i, 1),
                            T=cfg.mc.T)
                        us.append(predictive_entropy(mc_sample(models[i], ub, mc_cfg)))
                    w_u = unsup_weight(us[0], us[1], cfg.unsup_norm, True)
                    w_mean = float(np.mean(w_u, dtype=np.float64))
                else:
                    w_u = 1.0
                    w_mean = 1.0
                agr = agreement_loss(p[0], p[1], w_u)

                pick = derived_rng(gs, STREAM_DIVERSITY, epoch, it).choice(
                    all_lab_imgs.shape[0], size=min(bs_l, all_lab_imgs.shape[0]), replace=False)
                x_div = np.concatenate([all_lab_imgs[pick], ub])
                y_div = np.concatenate([
                    all_lab_masks[pick],
                    np.full(ub.shape, SENTINEL, dtype=np.uint8)])
                div = diversity_loss(models[0], models[1], x_div, y_div, cfg.adv,
                                     derive_seed(gs, STREAM_VAT, epoch, it))
                agr_v = _ensure_finite("agr", float(agr.data), epoch, it)
                div_v = _ensure_finite("div", float(div.data), epoch, it)
                total = total_loss(sup_losses[0] + sup_losses[1], agr, div, lam_cot, lam_div)
            else:
                agr_v = div_v = 0.0
                w_mean = 1.0
                total = sup_losses[0] + sup_losses[1]
            _ensure_finite("total", float(total.data), epoch, it)

            grads = backward(total)
            for i in (0, 1):
                g = segnet.extract_param_grads(models[i], grads)
                models[i], states[i] = segnet.apply_update(models[i], g, states[i], lr)

            acc["sup0"] += sup_v[0]
            acc["sup1"] += sup_v[1]
            acc["agr"] += agr_v
            acc["div"] += div_v
            acc["tot0"] += sup_v[0] + lam_cot * agr_v + lam_div * div_v
            acc["tot1"] += sup_v[1] + lam_cot * agr_v + lam_div * div_v
            acc["wmean"] += w_mean

        # Test-set predictive entropy, one fixed MC draw family per epoch.
        ent = []
        for i in (0, 1):
            mc_cfg = McConfig(
                base_seed=derive_seed(gs, STREAM_MC_EVAL, cfg.mc.base_seed, epoch, i),
                T=cfg.mc.T)
            ent.append(predictive_entropy(mc_sample(models[i], test_imgs, mc_cfg)))
        mean_entropy = float(np.mean([u.mean(dtype=np.float64) for u in ent]))

        last = epoch == cfg.epochs - 1
        if out_dir is not None and cfg.heatmap_every and (
                (epoch + 1) % cfg.heatmap_every == 0 or last):
            hdir = os.path.join(out_dir, HEATMAP_DIR)
            os.makedirs(hdir, exist_ok=True)
            for i in (0, 1):
                export_heatmap(ent[i][:_HEATMAP_ITEMS], bundle.num_classes, hdir, i + 1, epoch)

        n = float(iterations)
        epoch_logs.append(EpochLog(
            epoch=epoch,
            lr=lr,
            lambda_cot=lam_cot,
            lambda_div=lam_div,
            sup=(acc["sup0"] / n, acc["sup1"] / n),
            agr=acc["agr"] / n,
            div=acc["div"] / n,
            total=(acc["tot0"] / n, acc["tot1"] / n),
            unsup_weight_mean=acc["wmean"] / n,
            mean_test_entropy=mean_entropy,
        ))

        if out_dir is not None and (last or (
                cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            rel = f"{CHECKPOINT_DIR}/epoch_{epoch + 1:04d}"
            save_checkpoint(models, states, epoch + 1, cfg, os.path.join(out_dir, rel))
            ckpt_paths.append(rel)

    final_avg, final_vot = evaluate(models, bundle.test, bundle.num_classes)
    report = RunReport(epochs=epoch_logs, final_avg=final_avg, final_vot=final_vot,
                       checkpoints=ckpt_paths)
    if out_dir is not None:
        _write_losses_csv(os.path.join(out_dir, LOSSES_CSV), epoch_logs)
        with open(os.path.join(out_dir, REPORT_JSON), "w") as f:
            f.write(report.to_json())
    return report


def _write_losses_csv(path, logs: list[EpochLog]) -> None:
    # Full repr for floats so the decomposition identity survives the round trip.
    cols = ["epoch", "lr", "lambda_cot", "lambda_div", "sup_1", "sup_2", "agr", "div",
            "total_1", "total_2", "unsup_weight_mean", "mean_test_entropy"]
    lines = [",".join(cols)]
    for e in logs:
        row = [e.epoch, e.lr, e.lambda_cot, e.lambda_div, e.sup[0], e.sup[1],
               e.agr, e.div, e.total[0], e.total[1], e.unsup_weight_mean,
               e.mean_test_entropy]
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
