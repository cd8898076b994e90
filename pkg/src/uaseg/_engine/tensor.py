"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor is a node in an implicit computation graph. Gradients are computed
functionally: backward(loss) returns a map from leaf tensors to gradient
arrays and mutates nothing, so several backward passes over overlapping
graphs (e.g. adversarial example generation followed by the training step)
cannot contaminate each other.
"""

from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from ..errors import GraphError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Array value plus the bookkeeping needed for reverse-mode gradients.

    parents/backward_fn are set only by the ops module; leaves have neither.
    backward_fn maps the output gradient to one gradient per parent (None for
    parents that do not need one).
    """

    __slots__ = ("data", "requires_grad", "parents", "backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut loose from the graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic operators are attached by the ops module to avoid a
    # circular import; see ops.py.


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph under root."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar root w.r.t. every requires_grad leaf below it.

    The returned dict is keyed by tensor identity. Intermediate gradients are
    dropped as soon as they have been consumed.
    """
    if root.data.size != 1:
        raise GraphError(f"backward expects a scalar, got shape {root.data.shape}")
    order = _topo_order(root)
    grads: dict[Tensor, np.ndarray] = {root: np.ones_like(root.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(node, None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                result[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return result
