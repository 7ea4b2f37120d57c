"""Helpers that run a graph-building closure on a fresh tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, NumcoreError, Tape, Tensor, as_tensor


def evaluate_and_backprop(fn: Callable[..., Tensor], inputs: Sequence):
    """Evaluate ``fn(*inputs)`` and return ``(value, grads)``.

    ``grads[i]`` has the shape of ``inputs[i]``; inputs the output does not
    depend on get zero gradients. The output may have any shape; a non-scalar
    output is back-propagated with a seed of ones (gradient of its sum).
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = as_tensor(fn(*leaves))
    if not np.isfinite(out.data).all():
        raise NonFiniteError("evaluate_and_backprop", "forward value")
    if not out.requires_grad:
        return out.data, [np.zeros_like(l.data) for l in leaves]
    adj = tape.backward(out)
    grads = [np.array(np.broadcast_to(adj.get(id(l), 0.0), l.shape)) for l in leaves]
    return out.data, grads


def value_of(fn: Callable[..., Tensor], inputs: Sequence) -> np.ndarray:
    return as_tensor(fn(*[Tensor(np.asarray(x, dtype=np.float64)) for x in inputs])).data


def grad_check(fn: Callable[..., Tensor], point: Sequence, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = [np.array(p, dtype=np.float64) for p in point]
    value, grads = evaluate_and_backprop(fn, point)
    if np.ndim(value) != 0:
        raise NumcoreError(f"grad_check needs a scalar output, got shape {np.shape(value)}")
    worst = 0.0
    for i, p in enumerate(point):
        flat = p.reshape(-1)
        g = grads[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = float(value_of(fn, point))
            flat[j] = orig - step
            down = float(value_of(fn, point))
            flat[j] = orig
            fd = (up - down) / (2.0 * step)
            worst = max(worst, abs(g[j] - fd) / max(1.0, abs(g[j])))
    return worst
