"""Differentiable operations on (batch, channel, height, width) tensors."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from thermofuse.engine import kernels
from thermofuse.engine.tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return make_result(out, (x,), lambda g: (g * (x.data > 0),), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def total(x: Tensor) -> Tensor:
    return make_result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),), "mean")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- convolution / resampling -----------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation; weight is (out, in, k, k) with k odd."""
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    p = k // 2
    wd = np.ascontiguousarray(weight.data)
    xd = x.data.astype(wd.dtype, copy=False)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(xd)
    out = np.zeros((B, O, H, W), dtype=wd.dtype)
    kernels.conv_forward(xp, wd, out)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=wd.dtype)
        # input gradient: 'same' correlation of g with the flipped, transposed kernel
        dx = None
        if x.requires_grad or x._backward is not None:
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
            w_adj = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dx = np.zeros((B, C, H, W), dtype=g.dtype)
            kernels.conv_forward(gp, w_adj, dx)
        dw = np.zeros_like(wd)
        kernels.conv_backward_weight(g, xp, dw)
        grads = (dx, dw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 / stride 2; gradient goes to the first maximal element in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return make_result(out, (x,), backward, "max_pool2")


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    # even output i+1 reads input i as its left neighbour; odd output i-1 reads input i on the right
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., :1] += 0.25 * even[..., :1]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1:] += 0.25 * odd[..., -1:]
    return np.moveaxis(out, -1, axis)


def upsample2_bilinear(x: Tensor) -> Tensor:
    """2x bilinear upsampling, half-pixel centres (align_corners=False), edge-clamped."""
    out = _up_axis(_up_axis(x.data, 2), 3)
    return make_result(out, (x,), lambda g: (_up_axis_adjoint(_up_axis_adjoint(g, 3), 2),), "upsample2")


# -- losses -------------------------------------------------------------------------

def softmax_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel-averaged softmax cross-entropy; labels are (B, H, W) ints."""
    z = logits.data
    labels = np.asarray(labels)
    C = z.shape[1]
    if labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    picked = np.take_along_axis(z, labels[:, None], axis=1)[:, 0]
    n = labels.size
    loss = np.array((lse - picked).sum() / n)

    def backward(g):
        grad = ez / se
        np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1.0, axis=1)
        return (grad * (g / n),)

    return make_result(loss, (logits,), backward, "softmax_ce")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-averaged binary cross-entropy evaluated on logits."""
    z = logits.data
    y = np.asarray(target, dtype=np.float64).reshape(z.shape)
    n = z.size
    loss = np.array((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).sum() / n)
    return make_result(loss, (logits,), lambda g: ((_sigmoid(z) - y) * (g / n),), "bce")


def l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-averaged absolute error; subgradient 0 where pred == target."""
    d = pred.data - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    n = d.size
    return make_result(np.array(np.abs(d).sum() / n), (pred,), lambda g: (np.sign(d) * (g / n),), "l1")
