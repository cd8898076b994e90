"""Small encoder-decoder segmentation network.

The network is a stack of 3x3 conv stages: each encoder stage halves the
spatial resolution, each decoder stage doubles it back, and a 1x1 head maps
to class logits. Exactly one dropout site sits between encoder and decoder;
it is driven by an explicit seed so every stochastic forward pass is
reproducible. Models are plain values (config + named parameter tensors) and
optimizer updates return new models instead of mutating.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ._engine import Tensor, backward, grad_enabled, ops
from .errors import ConfigurationError, DimensionError, FormatError, GraphError, InputError
from .seeding import rng_from

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"UASEGCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    num_classes: int
    input_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    dropout_rate: float = 0.5

    def validate(self) -> "SegNetConfig":
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.input_channels < 1 or self.base_channels < 1:
            raise ConfigurationError("input_channels and base_channels must be >= 1")
        return self


def layer_plan(cfg: SegNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every parameter tensor."""
    plan: list[tuple[str, tuple[int, ...]]] = []
    ch = cfg.input_channels
    for i in range(cfg.depth):
        out = cfg.base_channels * (2 ** i)
        plan.append((f"enc{i}.w", (out, ch, 3, 3)))
        plan.append((f"enc{i}.b", (out,)))
        ch = out
    for i in range(cfg.depth):
        out = cfg.base_channels * (2 ** max(cfg.depth - 2 - i, 0))
        plan.append((f"dec{i}.w", (out, ch, 3, 3)))
        plan.append((f"dec{i}.b", (out,)))
        ch = out
    plan.append(("head.w", (cfg.num_classes, ch, 1, 1)))
    plan.append(("head.b", (cfg.num_classes,)))
    return plan


@dataclass
class SegModel:
    config: SegNetConfig
    params: dict[str, Tensor] = field(repr=False)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def astype(self, dtype) -> "SegModel":
        params = {
            name: Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self.params.items()
        }
        return SegModel(self.config, params)

    def with_param(self, name: str, values: np.ndarray) -> "SegModel":
        params = dict(self.params)
        params[name] = Tensor(np.asarray(values), requires_grad=True)
        return SegModel(self.config, params)


def init_model(config: SegNetConfig, seed: int) -> SegModel:
    """Uniform fan-in initialization; bit-identical for equal (config, seed)."""
    config.validate()
    rng = rng_from(seed)
    params: dict[str, Tensor] = {}
    for name, shape in layer_plan(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(w.astype(np.float32), requires_grad=True)
            last_bound = bound
        else:
            b = rng.uniform(-last_bound, last_bound, size=shape)
            params[name] = Tensor(b.astype(np.float32), requires_grad=True)
    return SegModel(config, params)


def _as_batch(images, channels: int) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4:
        raise DimensionError(f"expected a (N, H, W) or (N, C, H, W) batch, got shape {arr.shape}")
    if arr.shape[1] != channels:
        raise DimensionError(f"expected {channels} channel(s), got {arr.shape[1]}")
    return arr


def forward(model: SegModel, images, mode: int | None = None) -> Tensor:
    """Logits for a batch; `mode` is None for deterministic inference or an
    integer seed for one stochastic dropout draw.

    `images` may be an ndarray (graph leaf is created internally) or a Tensor
    of shape (N, C, H, W) when input gradients are needed.
    """
    cfg = model.config
    pdtype = next(iter(model.params.values())).data.dtype
    if isinstance(images, Tensor):
        x = images
        arr = _as_batch(images, cfg.input_channels)
        if arr is not images.data:
            raise DimensionError("Tensor input must already have shape (N, C, H, W)")
    else:
        arr = _as_batch(images, cfg.input_channels)
        x = Tensor(arr.astype(pdtype, copy=False))
    if not np.all(np.isfinite(arr)):
        raise InputError("input batch contains non-finite values")
    h, w = arr.shape[2], arr.shape[3]
    stride = 2 ** cfg.depth
    if h % stride or w % stride:
        raise DimensionError(f"spatial dims ({h}, {w}) must be divisible by {stride}")

    p = model.params
    for i in range(cfg.depth):
        x = ops.relu(ops.conv2d(x, p[f"enc{i}.w"], pad=1) + _bias(p[f"enc{i}.b"]))
        x = ops.avg_pool2(x)
    if mode is not None and cfg.dropout_rate > 0:
        rng = rng_from(mode)
        keep = rng.random(x.data.shape) >= cfg.dropout_rate
        scale = 1.0 / (1.0 - cfg.dropout_rate)
        mask = keep.astype(x.data.dtype) * x.data.dtype.type(scale)
        x = x * Tensor(mask)
    for i in range(cfg.depth):
        x = ops.upsample2(x)
        x = ops.relu(ops.conv2d(x, p[f"dec{i}.w"], pad=1) + _bias(p[f"dec{i}.b"]))
    return ops.conv2d(x, p["head.w"], pad=0) + _bias(p["head.b"])


def _bias(b: Tensor) -> Tensor:
    data = b.data.reshape(1, -1, 1, 1)
    if grad_enabled() and (b.requires_grad or b.parents):
        return Tensor(data, requires_grad=True, parents=(b,),
                      backward_fn=lambda g: (g.reshape(b.data.shape),))
    return Tensor(data)


def softmax(logits) -> Tensor:
    """Channel-wise softmax over logits (N, K, H, W)."""
    t = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    if not np.all(np.isfinite(t.data)):
        raise InputError("logits contain non-finite values")
    return ops.softmax(t, axis=1)


def extract_param_grads(model: SegModel, grads: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-parameter gradients out of a backward() result; zeros where a
    parameter did not participate."""
    out: dict[str, np.ndarray] = {}
    hit = False
    for name, t in model.params.items():
        g = grads.get(t)
        if g is None:
            out[name] = np.zeros_like(t.data)
        else:
            out[name] = g
            hit = True
    if not hit:
        raise GraphError("loss is not connected to any parameter of this model")
    return out


def param_gradients(model: SegModel, loss: Tensor) -> dict[str, np.ndarray]:
    return extract_param_grads(model, backward(loss))


def input_gradient(images: Tensor, loss: Tensor) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the image leaf used to build it."""
    g = backward(loss).get(images)
    if g is None:
        raise GraphError("loss is not connected to the given image tensor")
    return g


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def initial(model: SegModel) -> "AdamState":
        zeros = lambda: {k: np.zeros_like(p.data) for k, p in model.params.items()}
        return AdamState(m=zeros(), v=zeros(), t=0)


def apply_update(
    model: SegModel,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[SegModel, AdamState]:
    """One Adam step; returns the updated model and state, mutating neither."""
    t = state.t + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_params[name] = Tensor((p.data - step).astype(p.data.dtype), requires_grad=True)
        new_m[name] = m.astype(p.data.dtype)
        new_v[name] = v.astype(p.data.dtype)
    return SegModel(model.config, new_params), AdamState(new_m, new_v, t)


def _write_tensors(out: bytearray, tensors: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}", self.off)
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]


def _read_tensors(r: _Reader) -> dict[str, np.ndarray]:
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.u16("tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        rank = r.u8("tensor rank")
        shape = tuple(r.u32("tensor dim") for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        raw = r.take(4 * n, f"tensor data for {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return tensors


def save_model(model: SegModel, path) -> None:
    """Checkpoint: magic, version, config block, then named float32 tensors."""
    cfg = model.config
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<IIII", cfg.input_channels, cfg.num_classes, cfg.base_channels, cfg.depth)
    out += struct.pack("<f", cfg.dropout_rate)
    _write_tensors(out, model.param_arrays())
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_model(path) -> SegModel:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    magic = r.take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", len(CKPT_MAGIC))
    in_ch = r.u32("input_channels")
    k = r.u32("num_classes")
    base = r.u32("base_channels")
    depth = r.u32("depth")
    rate = r.f32("dropout_rate")
    cfg = SegNetConfig(num_classes=k, input_channels=in_ch, base_channels=base,
                       depth=depth, dropout_rate=rate).validate()
    tensors = _read_tensors(r)
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes", r.off)
    expected = layer_plan(cfg)
    if list(tensors) != [n for n, _ in expected] or any(
        tensors[n].shape != s for n, s in expected
    ):
        raise FormatError(f"{path}: parameter tensors do not match the config block")
    params = {name: Tensor(tensors[name], requires_grad=True) for name, _ in expected}
    return SegModel(cfg, params)
