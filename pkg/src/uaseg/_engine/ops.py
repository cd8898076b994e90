"""Differentiable operations over Tensors.

Each op computes its forward value with numpy and, when the graph is live,
attaches a closure producing one gradient per parent. Reductions accumulate
in 64-bit regardless of storage dtype.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, grad_enabled


def _track(*parents: Tensor) -> bool:
    return grad_enabled() and any(p.requires_grad or p.parents for p in parents)


def _out(data, parents, backward_fn):
    if backward_fn is not None:
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    fn = None
    if _track(a, b):
        def fn(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))
    return _out(data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    fn = None
    if _track(a, b):
        def fn(g):
            return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))
    return _out(data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    fn = None
    if _track(a, b):
        def fn(g):
            return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))
    return _out(data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    fn = None
    if _track(a, b):
        def fn(g):
            ga = _unbroadcast(g / b.data, a.data.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
            return (ga, gb)
    return _out(data, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    fn = None
    if _track(a):
        def fn(g):
            return (-g,)
    return _out(-a.data, (a,), fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)
    fn = None
    if _track(a):
        def fn(g):
            return (g / a.data,)
    return _out(data, (a,), fn)


def clip_min(a, lo: float) -> Tensor:
    """Elementwise max(a, lo); gradient is zero where the clamp is active."""
    a = as_tensor(a)
    data = np.maximum(a.data, a.dtype.type(lo))
    fn = None
    if _track(a):
        mask = a.data > lo
        def fn(g):
            return (g * mask,)
    return _out(data, (a,), fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)
    fn = None
    if _track(a):
        mask = a.data > 0
        def fn(g):
            return (g * mask,)
    return _out(data, (a,), fn)


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    fn = None
    if _track(a):
        def fn(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=False),)
    return _out(data, (a,), fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype)
    fn = None
    if _track(a):
        def fn(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            gg = gg / a.dtype.type(count)
            return (np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=False),)
    return _out(data, (a,), fn)


def softmax(a, axis: int = 1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    y = (e / s).astype(a.dtype)
    fn = None
    if _track(a):
        def fn(g):
            dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
            return (y * (g - dot),)
    return _out(y, (a,), fn)


def take_channel(a, idx: np.ndarray) -> Tensor:
    """Select one channel per pixel: a (N, K, H, W), idx (N, H, W) -> (N, H, W)."""
    a = as_tensor(a)
    idx4 = idx[:, None, :, :]
    data = np.take_along_axis(a.data, idx4, axis=1)[:, 0]
    fn = None
    if _track(a):
        def fn(g):
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, idx4, g[:, None, :, :].astype(a.dtype, copy=False), axis=1)
            return (ga,)
    return _out(data, (a,), fn)


def conv2d(x, w, pad: int) -> Tensor:
    """Stride-1 cross-correlation with zero padding; no bias."""
    x, w = as_tensor(x), as_tensor(w)
    data = kernels.conv2d_forward(x.data, w.data, pad)
    fn = None
    if _track(x, w):
        def fn(g):
            gx = kernels.conv2d_backward_input(g, w.data, pad) if (x.requires_grad or x.parents) else None
            gw = kernels.conv2d_backward_weight(g, x.data, pad) if (w.requires_grad or w.parents) else None
            return (gx, gw)
    return _out(data, (x, w), fn)


def avg_pool2(a) -> Tensor:
    """2x2 average pooling, stride 2."""
    a = as_tensor(a)
    d = a.data
    # Four strided adds beat a reshape-mean reduction by a wide margin here.
    data = (d[..., ::2, ::2] + d[..., 1::2, ::2] + d[..., ::2, 1::2] + d[..., 1::2, 1::2]) \
        * d.dtype.type(0.25)
    fn = None
    if _track(a):
        def fn(g):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * a.dtype.type(0.25)
            return (gx,)
    return _out(data, (a,), fn)


def upsample2(a) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    a = as_tensor(a)
    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    fn = None
    if _track(a):
        n, c, h, w = a.data.shape
        def fn(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _out(data, (a,), fn)


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
