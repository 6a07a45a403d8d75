"""Plain gradient-descent updates and learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from .tensor import _check_finite


def sgd_step(params, lr, weight_decay=0.0):
    """In-place p <- p - lr * (g + weight_decay * p); gradient buffers cleared.

    Parameters without an accumulated gradient are left untouched.  A shape
    mismatch between a parameter and its gradient is a hard error.
    """
    for p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
            )
        if weight_decay:
            g = g + weight_decay * p.data
        p.data -= lr * g.astype(p.data.dtype, copy=False)
        _check_finite(p.data, "sgd_step")
        p.grad = None


def cosine_lr(base, step, total):
    """Cosine annealing from ``base`` at step 0 toward 0 at step ``total``."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    step = min(max(int(step), 0), total)
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total))


def grad_sq_norm(params):
    """Sum of squared gradient entries across params, reduced in float64."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return total
