"""Line-based `key = value` configuration covering dataset generation, the
labeled/unlabeled split, and every training knob.

Unknown keys are rejected, every key has a documented default, and
parse -> serialize -> parse is the identity. Values are typed (int, float,
bool, str); `loss.ramp_epochs` additionally accepts `auto` (resolve from the
epoch count at run time). The model's class count and input channel count are
not separate keys: they follow the dataset (`data.num_classes`, single-channel
images), which removes an inconsistency the trainer would reject anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

from .adversarial import AdvConfig
from .data import SplitSpec, SyntheticSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .segnet import SegNetConfig
from .trainer import METHODS, TrainConfig
from .uncertainty import MODE_LITERAL, MODE_RECTIFIED, McConfig, UncertaintySchedule, UnsupNormConfig


@dataclass(frozen=True)
class _Key:
    type: type
    default: object
    doc: str
    choices: tuple | None = None
    allow_auto: bool = False


REGISTRY: dict[str, _Key] = {
    "data.n_images": _Key(int, 200, "number of generated training images"),
    "data.seed": _Key(int, 0, "seed for image synthesis (train and test)"),
    "data.height": _Key(int, 32, "image height in pixels"),
    "data.width": _Key(int, 32, "image width in pixels"),
    "data.num_classes": _Key(int, 4, "classes incl. background (2-4); also sets the model head"),
    "data.noise_std": _Key(float, 0.1, "Gaussian pixel noise standard deviation"),
    "data.n_test": _Key(int, 50, "number of held-out test images"),
    "split.label_ratio": _Key(float, 0.1, "fraction of training images that keep labels"),
    "split.split_seed": _Key(int, 0, "seed for the labeled/unlabeled partition"),
    "train.epochs": _Key(int, 40, "training epochs"),
    "train.method": _Key(str, "ours", "training method", choices=METHODS),
    "train.global_seed": _Key(int, 0, "seed for init, dropout, batching, and perturbations"),
    "train.batch_size_labeled": _Key(int, 4, "labeled batch size per model"),
    "train.batch_size_unlabeled": _Key(int, 10, "unlabeled batch size (shared)"),
    "train.lr": _Key(float, 1e-3, "Adam learning rate"),
    "train.lr_decay_every": _Key(int, 30, "divide the learning rate by 10 every N epochs"),
    "train.heatmap_every": _Key(int, 10, "write uncertainty heatmaps every N epochs (0 = never)"),
    "train.checkpoint_every": _Key(int, 0, "checkpoint every N epochs (0 = final only)"),
    "model.base_channels": _Key(int, 8, "channels of the first encoder stage"),
    "model.depth": _Key(int, 2, "encoder/decoder stages (input dims must divide 2^depth)"),
    "model.dropout_rate": _Key(float, 0.5, "dropout probability at the bottleneck site"),
    "mc.base_seed": _Key(int, 0, "selects an independent family of MC-dropout draws"),
    "mc.T": _Key(int, 8, "stochastic forward passes per uncertainty estimate"),
    "schedule.sup_start_epoch": _Key(int, 0, "first epoch with supervised uncertainty weighting"),
    "schedule.unsup_start_epoch": _Key(int, 20, "first epoch with agreement uncertainty weighting"),
    "unsup_norm.beta": _Key(float, 0.7, "scale of the agreement weight normalization"),
    "unsup_norm.c_norm": _Key(float, 2.0, "offset of the agreement weight normalization"),
    "unsup_norm.mode": _Key(str, MODE_RECTIFIED, "agreement weight form",
                            choices=(MODE_LITERAL, MODE_RECTIFIED)),
    "loss.lambda_cot_max": _Key(float, 1.0, "agreement loss weight after ramp-up"),
    "loss.lambda_div_max": _Key(float, 0.5, "diversity loss weight after ramp-up"),
    "loss.ramp_epochs": _Key(int, None, "ramp-up length in epochs, or auto (10% of epochs)",
                             allow_auto=True),
    "adv.eps_fgsm": _Key(float, 0.03, "FGSM step size (L-infinity radius)"),
    "adv.eps_vat": _Key(float, 10.0, "VAT perturbation L2 radius"),
    "adv.vat_xi": _Key(float, 10.0, "VAT finite-difference probe scale"),
    "adv.vat_power_iters": _Key(int, 1, "VAT power iterations"),
    "adv.clamp_to_unit": _Key(bool, True, "clamp adversarial images back to [0, 1]"),
}


def default_config() -> dict:
    return {name: key.default for name, key in REGISTRY.items()}


def _parse_value(name: str, key: _Key, raw: str, where: str):
    if key.allow_auto and raw == "auto":
        return None
    try:
        if key.type is bool:
            if raw not in ("true", "false"):
                raise ValueError
            value = raw == "true"
        elif key.type is int:
            value = int(raw)
        elif key.type is float:
            value = float(raw)
        else:
            value = raw
    except ValueError:
        expected = key.type.__name__ + (" or 'auto'" if key.allow_auto else "")
        raise ConfigurationError(f"{where}: value {raw!r} for {name} is not a valid {expected}")
    if key.choices is not None and value not in key.choices:
        raise ConfigurationError(
            f"{where}: {name} must be one of {', '.join(key.choices)}; got {raw!r}")
    return value


def parse_config(text: str, source: str = "<config>") -> dict:
    cfg = default_config()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{source}:{ln}: expected 'key = value', got {line!r}")
        name = name.strip()
        if name not in REGISTRY:
            raise ConfigurationError(f"{source}:{ln}: unknown key {name!r}")
        cfg[name] = _parse_value(name, REGISTRY[name], value.strip(), f"{source}:{ln}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(text, source=str(path))


def apply_override(cfg: dict, assignment: str, where: str = "<override>") -> None:
    """Apply one `key=value` override in place; same typing rules as the file."""
    name, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigurationError(f"{where}: expected key=value, got {assignment!r}")
    name = name.strip()
    if name not in REGISTRY:
        raise ConfigurationError(f"{where}: unknown key {name!r}")
    cfg[name] = _parse_value(name, REGISTRY[name], value.strip(), where)


def _format_value(key: _Key, value) -> str:
    if key.allow_auto and value is None:
        return "auto"
    if key.type is bool:
        return "true" if value else "false"
    if key.type is float:
        return repr(float(value))
    return str(value)


def serialize_config(cfg: dict) -> str:
    unknown = set(cfg) - set(REGISTRY)
    if unknown:
        raise ConfigurationError(f"unknown keys: {sorted(unknown)}")
    lines = []
    section = None
    for name, key in REGISTRY.items():
        head = name.split(".", 1)[0]
        if head != section:
            if section is not None:
                lines.append("")
            lines.append(f"# [{head}]")
            section = head
        value = cfg.get(name, key.default)
        lines.append(f"{name} = {_format_value(key, value)}")
    return "\n".join(lines) + "\n"


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(
        n_images=cfg["data.n_images"],
        seed=cfg["data.seed"],
        height=cfg["data.height"],
        width=cfg["data.width"],
        num_classes=cfg["data.num_classes"],
        noise_std=cfg["data.noise_std"],
    ).validate()


def split_spec(cfg: dict) -> SplitSpec:
    return SplitSpec(
        label_ratio=cfg["split.label_ratio"],
        split_seed=cfg["split.split_seed"],
    ).validate()


def train_config(cfg: dict, num_classes: int | None = None) -> TrainConfig:
    """Build the trainer configuration; `num_classes` overrides the config
    value when the dataset is loaded from disk."""
    k = num_classes if num_classes is not None else cfg["data.num_classes"]
    return TrainConfig(
        epochs=cfg["train.epochs"],
        method=cfg["train.method"],
        global_seed=cfg["train.global_seed"],
        batch_size_labeled=cfg["train.batch_size_labeled"],
        batch_size_unlabeled=cfg["train.batch_size_unlabeled"],
        lr=cfg["train.lr"],
        lr_decay_every=cfg["train.lr_decay_every"],
        heatmap_every=cfg["train.heatmap_every"],
        checkpoint_every=cfg["train.checkpoint_every"],
        model=SegNetConfig(
            num_classes=k,
            input_channels=1,
            base_channels=cfg["model.base_channels"],
            depth=cfg["model.depth"],
            dropout_rate=cfg["model.dropout_rate"],
        ),
        mc=McConfig(base_seed=cfg["mc.base_seed"], T=cfg["mc.T"]),
        schedule=UncertaintySchedule(
            sup_start_epoch=cfg["schedule.sup_start_epoch"],
            unsup_start_epoch=cfg["schedule.unsup_start_epoch"],
        ),
        unsup_norm=UnsupNormConfig(
            beta=cfg["unsup_norm.beta"],
            c_norm=cfg["unsup_norm.c_norm"],
            mode=cfg["unsup_norm.mode"],
        ),
        loss_weights=LossWeights(
            lambda_cot_max=cfg["loss.lambda_cot_max"],
            lambda_div_max=cfg["loss.lambda_div_max"],
            ramp_epochs=cfg["loss.ramp_epochs"],
        ),
        adv=AdvConfig(
            eps_fgsm=cfg["adv.eps_fgsm"],
            eps_vat=cfg["adv.eps_vat"],
            vat_xi=cfg["adv.vat_xi"],
            vat_power_iters=cfg["adv.vat_power_iters"],
            clamp_to_unit=cfg["adv.clamp_to_unit"],
        ),
    ).validate()
