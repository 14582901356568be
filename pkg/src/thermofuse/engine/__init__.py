"""Minimal 4-D tensor engine with reverse-mode differentiation."""

from thermofuse.engine.gradcheck import grad_check
from thermofuse.engine.ops import (add, bce_with_logits, concat, conv2d, l1, max_pool2, mean, mul, relu,
                                   sigmoid, softmax_ce, sub, total, upsample2_bilinear)
from thermofuse.engine.optim import AdamState, adam_step, conv_fans, glorot_uniform
from thermofuse.engine.tensor import Parameter, Tensor, no_grad

__all__ = [
    "AdamState", "Parameter", "Tensor", "adam_step", "add", "bce_with_logits", "concat", "conv2d",
    "conv_fans", "glorot_uniform", "grad_check", "l1", "max_pool2", "mean", "mul", "no_grad", "relu",
    "sigmoid", "softmax_ce", "sub", "total", "upsample2_bilinear",
]
