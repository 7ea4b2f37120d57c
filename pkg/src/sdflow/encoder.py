"""Per-frame static encoder, product-of-Gaussians aggregation and code shuffling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import init_mlp, mlp
from .numcore import Tensor, ops

LOGVAR_BOUND = 10.0


@dataclass
class GaussianCode:
    """Diagonal Gaussian; ``mean`` and ``logvar`` share a shape ``(..., n_f)``.

    Fields hold either numpy arrays or tensors.
    """

    mean: object
    logvar: object

    @property
    def n_f(self) -> int:
        return self.mean.shape[-1]

    def numpy(self) -> "GaussianCode":
        data = lambda a: a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
        return GaussianCode(data(self.mean), data(self.logvar))

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.numpy().logvar)


class StaticEncoder:
    """MLP ``x_t -> (mean, logvar)`` with tanh hidden layers."""

    def __init__(self, n_in: int, n_f: int, hidden: Sequence[int] = (64, 64), prefix: str = "encoder"):
        self.n_in, self.n_f, self.hidden, self.prefix = n_in, n_f, tuple(hidden), prefix

    @property
    def sizes(self) -> list[int]:
        return [self.n_in, *self.hidden, 2 * self.n_f]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        init_mlp(params, self.prefix, rng, self.sizes)
        return params

    def __call__(self, P, x) -> GaussianCode:
        return encode_frame(self, P, x)


def encode_frame(encoder: StaticEncoder, P, x) -> GaussianCode:
    """Encode frames of shape ``(..., n)`` into a code of shape ``(..., n_f)``."""
    x = ops.as_tensor(x)
    if x.shape[-1] != encoder.n_in:
        raise ValueError(f"encoder expects frames of dimension {encoder.n_in}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = ops.reshape(x, (-1, encoder.n_in)) if x.ndim != 2 else x
    out = mlp(P, encoder.prefix, flat, len(encoder.sizes) - 1)
    nf = encoder.n_f
    mean = out[:, :nf]
    logvar = ops.clip(out[:, nf:], -LOGVAR_BOUND, LOGVAR_BOUND)
    if x.ndim != 2:
        mean = ops.reshape(mean, lead + (nf,))
        logvar = ops.reshape(logvar, lead + (nf,))
    return GaussianCode(mean, logvar)


def _canonical_order(codes: Sequence[GaussianCode]) -> list[GaussianCode]:
    def key(c):
        c = c.numpy()
        return tuple(c.mean.ravel()) + tuple(c.logvar.ravel())
    return sorted(codes, key=key)


def aggregate(codes: Sequence[GaussianCode]) -> GaussianCode:
    """Renormalized product of Gaussians: precisions add, means are precision-weighted.

    Summation runs in a canonical (sorted) order so that any permutation of
    ``codes`` gives a bit-identical result.
    """
    if not codes:
        raise ValueError("aggregate needs at least one code")
    if len(codes) == 1:
        return codes[0]
    dims = {c.mean.shape for c in codes}
    if len(dims) != 1:
        raise ValueError(f"codes have different shapes: {sorted(dims)}")
    prec_sum = weighted = None
    for c in _canonical_order(codes):
        prec = ops.exp(ops.neg(c.logvar))
        pm = ops.mul(prec, c.mean)
        prec_sum = prec if prec_sum is None else ops.add(prec_sum, prec)
        weighted = pm if weighted is None else ops.add(weighted, pm)
    out = GaussianCode(ops.div(weighted, prec_sum), ops.neg(ops.log(prec_sum)))
    return out if any(isinstance(c.mean, Tensor) for c in codes) else out.numpy()


def aggregate_time(code: GaussianCode, axis: int = 1) -> GaussianCode:
    """Batched aggregation of per-frame codes along ``axis`` (the time axis)."""
    prec = ops.exp(ops.neg(code.logvar))
    prec_sum = ops.sum(prec, axis=axis)
    mean = ops.div(ops.sum(ops.mul(prec, code.mean), axis=axis), prec_sum)
    return GaussianCode(mean, ops.neg(ops.log(prec_sum)))


def reparameterize(code: GaussianCode, eta):
    """``f = mean + exp(logvar / 2) * eta``."""
    eta = np.asarray(eta, dtype=np.float64)
    if eta.shape[-1] != code.n_f:
        raise ValueError(f"noise dimension {eta.shape[-1]} != code dimension {code.n_f}")
    return ops.add(code.mean, ops.mul(ops.exp(ops.mul(code.logvar, 0.5)), eta))


def check_permutation(perm, T: int | None = None) -> np.ndarray:
    perm = np.asarray(perm)
    n = perm.shape[-1]
    if T is not None and n != T:
        raise ValueError(f"permutation has length {n}, expected {T}")
    if not np.array_equal(np.sort(perm, axis=-1), np.broadcast_to(np.arange(n), perm.shape)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
    return perm.astype(np.intp)


def random_permutations(rng: np.random.Generator, batch: int, T: int) -> np.ndarray:
    """Independent uniform permutations, one row per sequence (Fisher-Yates)."""
    return rng.permuted(np.tile(np.arange(T), (batch, 1)), axis=1)


def shuffle_codes(samples, perm):
    """Reorder along time: output position ``t`` holds input position ``perm[t]``.

    ``samples`` is ``(T, n_f)`` with ``perm`` of shape ``(T,)``, or a batch
    ``(B, T, n_f)`` with ``perm`` of shape ``(B, T)``.
    """
    samples = ops.as_tensor(samples)
    T = samples.shape[-2]
    perm = check_permutation(perm, T)
    if samples.ndim == 2:
        return ops.getitem(samples, perm)
    rows = np.arange(samples.shape[0])[:, None]
    return ops.getitem(samples, (rows, perm))
