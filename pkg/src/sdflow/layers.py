"""Small perceptron helpers shared by the encoder and the flows.

Parameters live in flat ``dict[str, ndarray]`` maps with dotted names; the
forward functions accept either arrays or :class:`~sdflow.numcore.Tensor`
leaves, so the same code serves training (on a tape) and inference.
"""
from __future__ import annotations

import numpy as np

from .numcore import ops


def init_dense(params: dict, name: str, rng: np.random.Generator, fan_in: int, fan_out: int,
               zero: bool = False, gain: float = 1.0) -> None:
    if zero:
        params[f"{name}.W"] = np.zeros((fan_in, fan_out))
    else:
        params[f"{name}.W"] = rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(max(fan_in, 1)))
    params[f"{name}.b"] = np.zeros(fan_out)


def dense(P, name: str, x):
    return ops.add(ops.matmul(x, P[f"{name}.W"]), P[f"{name}.b"])


def init_mlp(params: dict, name: str, rng, sizes, zero_last: bool = False) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_dense(params, f"{name}.l{i}", rng, a, b, zero=zero_last and last)


def mlp(P, name: str, x, n_layers: int):
    """tanh hidden activations, linear output."""
    h = x
    for i in range(n_layers):
        h = dense(P, f"{name}.l{i}", h)
        if i < n_layers - 1:
            h = ops.tanh(h)
    return h
