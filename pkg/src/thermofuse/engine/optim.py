"""Glorot initialisation and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from thermofuse.engine.tensor import Parameter


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "") -> Parameter:
    """U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-a, a, size=shape), name=name, fan_in=fan_in, fan_out=fan_out)


def conv_fans(out_channels: int, in_channels: int, k: int) -> tuple[int, int]:
    return in_channels * k * k, out_channels * k * k


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter, then zero the gradients."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for i, p in enumerate(params):
        key = p.name or str(i)
        m = state.m.setdefault(key, np.zeros_like(p.data))
        v = state.v.setdefault(key, np.zeros_like(p.data))
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0
