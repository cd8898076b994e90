"""Convolution kernel backend selection.

Two interchangeable implementations exist: a compiled Cython extension and a
pure numpy fallback. The compiled one is used when importable; the
UASEG_BACKEND environment variable ("compiled" or "numpy") forces a choice at
import time, and set_backend() switches at runtime (used by tests and the
benchmark). The two backends follow different summation orders, so results
agree to rounding but are not bit-identical across backends; each backend is
bit-deterministic on its own.
"""

import os

import numpy as np

from ..errors import ConfigurationError
from . import kernels_np

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {}
_BACKENDS["numpy"] = kernels_np
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def _initial_backend() -> str:
    forced = os.environ.get("UASEG_BACKEND", "").strip().lower()
    if forced:
        if forced not in ("compiled", "numpy"):
            raise ConfigurationError(f"UASEG_BACKEND must be 'compiled' or 'numpy', got {forced!r}")
        if forced not in _BACKENDS:
            raise ConfigurationError("UASEG_BACKEND=compiled but the extension is not built")
        return forced
    return "compiled" if "compiled" in _BACKENDS else "numpy"


_active = _initial_backend()


def get_backend() -> str:
    return _active


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ConfigurationError(f"unknown backend {name!r}, available: {available_backends()}")
    _active = name


def _ready(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Both operands must share one of the two supported dtypes.
    common = np.result_type(a, b)
    if common not in (np.float32, np.float64):
        common = np.float64
    return (
        np.ascontiguousarray(a, dtype=common),
        np.ascontiguousarray(b, dtype=common),
    )


def conv2d_forward(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    impl = _BACKENDS[_active]
    x, w = _ready(x, w)
    return np.asarray(impl.conv2d_forward(x, w, pad))


def conv2d_backward_weight(gy: np.ndarray, x: np.ndarray, pad: int) -> np.ndarray:
    impl = _BACKENDS[_active]
    gy, x = _ready(gy, x)
    return np.asarray(impl.conv2d_backward_weight(gy, x, pad))


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    # Gradient w.r.t. the input is itself a cross-correlation: flip the
    # kernel spatially, swap its in/out channel axes, and pad by k - 1 - pad.
    kh, kw = w.shape[2], w.shape[3]
    if kh != kw:
        raise ConfigurationError("only square kernels are supported")
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(gy, w_flip, kh - 1 - pad)
