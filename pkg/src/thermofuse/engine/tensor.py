"""Reverse-mode differentiation over numpy arrays."""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True
DEBUG = os.environ.get("THERMOFUSE_DEBUG", "") not in ("", "0")


class Tensor:
    """An array plus the information needed to back-propagate through it.

    ``grad`` is only accumulated on leaves with ``requires_grad`` (parameters
    and explicit inputs); intermediate gradients live for one backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # float32 arrays keep their precision; everything else becomes float64
            dtype = np.float32 if getattr(data, "dtype", None) == np.float32 else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op or 'leaf'})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic sugar
    def __add__(self, other):
        from thermofuse.engine import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from thermofuse.engine import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from thermofuse.engine import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from thermofuse.engine import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from thermofuse.engine import ops
        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ("name", "fan_in", "fan_out")

    def __init__(self, data, name: str = "", fan_in: int = 0, fan_out: int = 0):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.fan_in = fan_in
        self.fan_out = fan_out

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, linking it into the graph when any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.op = op
    if DEBUG and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
