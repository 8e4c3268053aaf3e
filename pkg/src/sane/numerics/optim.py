"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ArgumentError


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam update on raw arrays, in place.

    ``state`` is a dict that is populated on the first call (``step``, and
    per-parameter first/second moments). Parameters whose gradient is None are
    skipped but still count toward the step index.
    """
    b1, b2 = betas
    if "step" not in state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m, v = state["m"][i], state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return params, state


class AdamW:
    """Stateful wrapper of :func:`adamw_step` over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, lr=None):
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(factor)
    return total


def onecycle_lr(step, total_steps, lr_max, pct_start=0.3, div=25.0, final_div=1e4) -> float:
    """Linear warm-up from ``lr_max/div`` to ``lr_max``, then cosine decay to ``lr_max/final_div``."""
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    lr_start = lr_max / div
    lr_end = lr_max / final_div
    peak = pct_start * total_steps
    if step <= peak:
        if peak == 0:
            return lr_max
        return lr_start + (lr_max - lr_start) * step / peak
    frac = (step - peak) / (total_steps - peak)
    return lr_end + (lr_max - lr_end) * 0.5 * (1.0 + math.cos(math.pi * frac))
