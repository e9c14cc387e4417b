"""Adam-style optimizer with cosine learning-rate decay and best-point tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = ["OptimSchedule", "ParamGroup", "OptimResult", "OptimizationError", "cosine_lr", "optimize"]


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimSchedule:
    """First/second-moment adaptive updates, cosine-decayed learning rate."""

    steps: int
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class ParamGroup:
    params: list
    lr: float
    #: optional projection applied to raw values after each step (e.g. clamp
    #: clip factors into (0, 1]); must be deterministic
    project: object = None


@dataclass
class OptimResult:
    losses: list = field(default_factory=list)
    best_loss: float = math.inf
    best_step: int = -1


def cosine_lr(lr_init, step, total_steps):
    """Cosine decay from lr_init at step 0 toward 0 at step == total_steps."""
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def optimize(loss_fn, groups, sched):
    """Minimize `loss_fn` over the parameters in `groups`.

    `loss_fn` rebuilds the computation graph and returns a scalar Var.  The
    best-seen parameter values (including the initial point) are restored at
    the end, so the final loss never exceeds the loss at entry.

    Raises OptimizationError with the step index if the loss goes NaN.
    """
    params = [p for grp in groups for p in grp.params]
    m = [np.zeros_like(p.value) for p in params]
    v = [np.zeros_like(p.value) for p in params]
    b1, b2 = sched.betas

    result = OptimResult()
    best_values = [p.value.copy() for p in params]

    def evaluate():
        loss = loss_fn()
        if not isinstance(loss, ad.Var):
            raise OptimizationError("loss function must return a Var")
        if loss.value.size != 1:
            raise OptimizationError(f"loss must be scalar, got shape {loss.value.shape}")
        return loss

    for step in range(sched.steps):
        loss = evaluate()
        lval = float(loss.value)
        if math.isnan(lval):
            raise OptimizationError(f"NaN loss at step {step}")
        result.losses.append(lval)
        if lval < result.best_loss:
            result.best_loss = lval
            result.best_step = step
            best_values = [p.value.copy() for p in params]

        ad.backward(loss)
        t = step + 1
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        k = 0
        for grp in groups:
            lr = cosine_lr(grp.lr, step, sched.steps)
            for p in grp.params:
                g = p.grad if p.grad is not None else np.zeros_like(p.value)
                g = np.asarray(g, dtype=np.float64)
                m[k] = b1 * m[k] + (1.0 - b1) * g
                v[k] = b2 * v[k] + (1.0 - b2) * g * g
                p.value = p.value - lr * (m[k] / bias1) / (np.sqrt(v[k] / bias2) + sched.eps)
                if grp.project is not None:
                    p.value = np.asarray(grp.project(p.value), dtype=np.float64)
                p.clear_grad()
                k += 1

    # score the point reached by the last update as well
    final = evaluate()
    fval = float(final.value)
    if not math.isnan(fval):
        result.losses.append(fval)
        if fval < result.best_loss:
            result.best_loss = fval
            result.best_step = sched.steps
            best_values = [p.value.copy() for p in params]

    for p, best in zip(params, best_values):
        p.value = best
    return result
