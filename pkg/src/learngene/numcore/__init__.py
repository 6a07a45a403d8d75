"""Tensor arithmetic with reverse-mode gradients, seeded RNG, and SGD."""

from .optim import cosine_lr, grad_sq_norm, sgd_step
from .rng import SeededRng, derive_seed
from .tensor import (
    DEFAULT_DTYPE,
    NumericError,
    Tensor,
    add,
    broadcast_to,
    concat,
    conv2d,
    cross_entropy,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    no_grad,
    relu,
    relu6,
    reshape,
    softmax,
    sqrt,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "DEFAULT_DTYPE",
    "NumericError",
    "SeededRng",
    "Tensor",
    "add",
    "broadcast_to",
    "concat",
    "conv2d",
    "cosine_lr",
    "cross_entropy",
    "derive_seed",
    "div",
    "exp",
    "grad_sq_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "relu",
    "relu6",
    "reshape",
    "sgd_step",
    "softmax",
    "sqrt",
    "sub",
    "transpose",
    "tsum",
]
