"""Affine-coupling normalizing flows.

:class:`SequenceFlow` maps frames ``x_{1:T}`` to dynamic codes ``lambda_{1:T}``
one time step at a time. The coupling parameters at step ``t`` depend on a
context built from a GRU state over the *observed* frames ``x_{<t}`` and the
conditioning static code for that step, so the Jacobian is block-triangular
in time and the log-determinant is the sum of per-layer log-scales. The base
density is a standard normal that does not depend on the static code.

:class:`PriorFlow` is an unconditional coupling stack giving the density of
the static code.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import dense, init_dense
from .numcore import Tensor, ops

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def standard_normal_logpdf(z, axes) -> Tensor:
    """Sum of ``log N(z_i; 0, 1)`` over ``axes``."""
    z = ops.as_tensor(z)
    count = int(np.prod([z.shape[a] for a in np.atleast_1d(axes)]))
    return ops.sub(ops.mul(ops.sum(ops.square(z), axis=axes), -0.5), count * HALF_LOG_2PI)


class CouplingLayer:
    """Affine coupling ``w_B = v_B * exp(s) + t`` with ``(s, t) = net(v_A, context)``.

    ``parity`` selects which coordinates are transformed (``i % 2 == parity``);
    layers with alternating parity complement each other. For ``n == 1`` the
    pass-through half is empty and the scale and shift come from the context
    alone (or are free parameters when there is no context either). The
    log-scale is squashed to ``[-scale_bound, scale_bound]``.
    """

    def __init__(self, n: int, ctx_dim: int, parity: int, hidden: Sequence[int] = (64, 64),
                 scale_bound: float = 5.0, prefix: str = "coupling"):
        self.n, self.ctx_dim, self.parity = n, ctx_dim, parity
        self.hidden, self.scale_bound, self.prefix = tuple(hidden), scale_bound, prefix
        if n == 1:
            self.idx_a, self.idx_b = [], [0]
        else:
            self.idx_b = [i for i in range(n) if i % 2 == parity]
            self.idx_a = [i for i in range(n) if i % 2 != parity]
        eye = np.eye(n)
        self.sel_a = eye[:, self.idx_a]
        self.sel_b = eye[:, self.idx_b]
        self.merge = eye[:, self.idx_a + self.idx_b].T
        self.n_a, self.n_b = len(self.idx_a), len(self.idx_b)

    @property
    def has_net(self) -> bool:
        return self.n_a + self.ctx_dim > 0

    def init_params(self, rng: np.random.Generator, zero_last: bool = True) -> dict[str, np.ndarray]:
        p: dict[str, np.ndarray] = {}
        pre, out = self.prefix, 2 * self.n_b
        if not self.has_net:
            p[f"{pre}.out.b"] = np.zeros(out) if zero_last else 0.3 * rng.standard_normal(out)
            return p
        fan_in = self.n_a + self.ctx_dim
        h0 = self.hidden[0]
        if self.n_a:
            p[f"{pre}.in_a.W"] = rng.standard_normal((self.n_a, h0)) / np.sqrt(fan_in)
        if self.ctx_dim:
            p[f"{pre}.in_c.W"] = rng.standard_normal((self.ctx_dim, h0)) / np.sqrt(fan_in)
        p[f"{pre}.in.b"] = np.zeros(h0)
        for i, (a, b) in enumerate(zip(self.hidden[:-1], self.hidden[1:])):
            init_dense(p, f"{pre}.l{i + 1}", rng, a, b)
        init_dense(p, f"{pre}.out", rng, self.hidden[-1], out, zero=zero_last, gain=0.1)
        return p

    def scale_shift(self, P, v_a, ctx, rows: int):
        pre = self.prefix
        if not self.has_net:
            raw = ops.broadcast_to(P[f"{pre}.out.b"], (rows, 2 * self.n_b))
        else:
            h = P[f"{pre}.in.b"]
            if self.n_a:
                h = ops.add(ops.matmul(v_a, P[f"{pre}.in_a.W"]), h)
            if self.ctx_dim:
                h = ops.add(ops.matmul(ctx, P[f"{pre}.in_c.W"]), h)
            h = ops.tanh(h)
            for i in range(1, len(self.hidden)):
                h = ops.tanh(dense(P, f"{pre}.l{i}", h))
            raw = dense(P, f"{pre}.out", h)
        c = self.scale_bound
        log_scale = ops.mul(ops.tanh(ops.mul(raw[:, :self.n_b], 1.0 / c)), c)
        return log_scale, raw[:, self.n_b:]

    def _check(self, v, ctx):
        if v.ndim != 2 or v.shape[1] != self.n:
            raise ValueError(f"coupling layer expects (rows, {self.n}) input, got {v.shape}")
        if self.ctx_dim and (ctx is None or ctx.shape != (v.shape[0], self.ctx_dim)):
            got = None if ctx is None else ctx.shape
            raise ValueError(f"coupling layer expects context ({v.shape[0]}, {self.ctx_dim}), got {got}")

    def forward(self, P, v, ctx=None):
        """Returns ``(w, logdet)`` with ``logdet`` of shape ``(rows,)``."""
        v = ops.as_tensor(v)
        ctx = None if ctx is None else ops.as_tensor(ctx)
        self._check(v, ctx)
        v_a = ops.matmul(v, self.sel_a) if self.n_a else None
        v_b = ops.matmul(v, self.sel_b)
        s, t = self.scale_shift(P, v_a, ctx, v.shape[0])
        w_b = ops.add(ops.mul(v_b, ops.exp(s)), t)
        joined = ops.concat([v_a, w_b], axis=1) if self.n_a else w_b
        return ops.matmul(joined, self.merge), ops.sum(s, axis=1)

    def inverse(self, P, w, ctx=None):
        w = ops.as_tensor(w)
        ctx = None if ctx is None else ops.as_tensor(ctx)
        self._check(w, ctx)
        w_a = ops.matmul(w, self.sel_a) if self.n_a else None
        w_b = ops.matmul(w, self.sel_b)
        s, t = self.scale_shift(P, w_a, ctx, w.shape[0])
        v_b = ops.mul(ops.sub(w_b, t), ops.exp(ops.neg(s)))
        joined = ops.concat([w_a, v_b], axis=1) if self.n_a else v_b
        return ops.matmul(joined, self.merge)


def coupling_forward(layer: CouplingLayer, P, v, context=None):
    return layer.forward(P, v, context)


def coupling_inverse(layer: CouplingLayer, P, w, context=None):
    return layer.inverse(P, w, context)


class SequenceFlow:
    """Conditional flow over sequences ``(B, T, n)`` given codes ``(B, T, n_f)``."""

    def __init__(self, n: int, n_f: int, n_layers: int = 4, hidden: Sequence[int] = (64, 64),
                 rnn_width: int = 64, ctx_dim: int = 32, scale_bound: float = 5.0, prefix: str = "flow"):
        self.n, self.n_f, self.H, self.ctx_dim, self.prefix = n, n_f, rnn_width, ctx_dim, prefix
        self.layers = [CouplingLayer(n, ctx_dim, k % 2, hidden, scale_bound, f"{prefix}.c{k}")
                       for k in range(n_layers)]

    def init_params(self, rng: np.random.Generator, zero_last: bool = True) -> dict[str, np.ndarray]:
        n, H, C, pre = self.n, self.H, self.ctx_dim, self.prefix
        p = {
            f"{pre}.gru.Wx": rng.standard_normal((n, 3 * H)) / np.sqrt(n),
            f"{pre}.gru.bx": np.zeros(3 * H),
            f"{pre}.gru.Uh": rng.standard_normal((H, 3 * H)) / np.sqrt(H),
            f"{pre}.gru.bh": np.zeros(3 * H),
            f"{pre}.ctx.Wh": rng.standard_normal((H, C)) / np.sqrt(H + self.n_f),
            f"{pre}.ctx.Wf": rng.standard_normal((self.n_f, C)) / np.sqrt(H + self.n_f),
            f"{pre}.ctx.b": np.zeros(C),
        }
        for layer in self.layers:
            p.update(layer.init_params(rng, zero_last))
        return p

    def gru_step(self, P, h, x_t):
        pre, H = self.prefix, self.H
        gx = ops.add(ops.matmul(x_t, P[f"{pre}.gru.Wx"]), P[f"{pre}.gru.bx"])
        gh = ops.add(ops.matmul(h, P[f"{pre}.gru.Uh"]), P[f"{pre}.gru.bh"])
        zr = ops.sigmoid(ops.add(gx[:, :2 * H], gh[:, :2 * H]))
        z, r = zr[:, :H], zr[:, H:]
        cand = ops.tanh(ops.add(gx[:, 2 * H:], ops.mul(r, gh[:, 2 * H:])))
        return ops.add(cand, ops.mul(z, ops.sub(h, cand)))

    def context(self, P, h, code):
        pre = self.prefix
        pre_act = ops.add(ops.matmul(h, P[f"{pre}.ctx.Wh"]), ops.matmul(code, P[f"{pre}.ctx.Wf"]))
        return ops.tanh(ops.add(pre_act, P[f"{pre}.ctx.b"]))

    def _check(self, x, cond):
        if x.ndim != 3 or x.shape[2] != self.n:
            raise ValueError(f"sequence flow expects (B, T, {self.n}) frames, got {x.shape}")
        if cond.shape != (x.shape[0], x.shape[1], self.n_f):
            raise ValueError(f"conditioning codes have shape {cond.shape}, expected "
                             f"({x.shape[0]}, {x.shape[1]}, {self.n_f})")

    def transform(self, P, x, cond):
        """``x -> (lambda, logdet)``; ``logdet`` is ``log|det d lambda / d x|`` per sequence."""
        x, cond = ops.as_tensor(x), ops.as_tensor(cond)
        self._check(x, cond)
        B, T, n = x.shape
        h = np.zeros((B, self.H))
        states = [h]
        for t in range(T - 1):
            h = self.gru_step(P, h, x[:, t, :])
            states.append(h)
        prev = ops.reshape(ops.stack(states, axis=1), (B * T, self.H))
        ctx = self.context(P, prev, ops.reshape(cond, (B * T, self.n_f)))
        v = ops.reshape(x, (B * T, n))
        logdet = None
        for layer in self.layers:
            v, ld = layer.forward(P, v, ctx)
            logdet = ld if logdet is None else ops.add(logdet, ld)
        per_seq = ops.sum(ops.reshape(logdet, (B, T)), axis=1) if logdet is not None else np.zeros(B)
        return ops.reshape(v, (B, T, n)), ops.as_tensor(per_seq)

    def log_likelihood(self, P, x, cond):
        lam, logdet = self.transform(P, x, cond)
        return ops.add(standard_normal_logpdf(lam, (1, 2)), logdet)

    def generate(self, P, cond, lam=None, rng: np.random.Generator | None = None) -> np.ndarray:
        """Sequential inverse: rebuild ``x_t`` from ``lambda_t`` and the already rebuilt ``x_{<t}``."""
        cond = np.asarray(getattr(cond, "data", cond), dtype=np.float64)
        B, T, _ = cond.shape
        if lam is None:
            if rng is None:
                raise ValueError("pass either lam or rng")
            lam = rng.standard_normal((B, T, self.n))
        lam = np.asarray(lam, dtype=np.float64)
        h = np.zeros((B, self.H))
        frames = []
        for t in range(T):
            ctx = self.context(P, h, cond[:, t, :])
            v = lam[:, t, :]
            for layer in reversed(self.layers):
                v = layer.inverse(P, v, ctx)
            v = ops.as_tensor(v)
            frames.append(v.data)
            h = self.gru_step(P, h, v)
        return np.stack(frames, axis=1)


def sequence_transform(flow: SequenceFlow, P, x, cond):
    lam, logdet = flow.transform(P, x, cond)
    return lam, logdet


def sequence_log_likelihood(flow: SequenceFlow, P, x, cond):
    return flow.log_likelihood(P, x, cond)


def sequence_generate(flow: SequenceFlow, P, cond, lam=None, rng=None) -> np.ndarray:
    return flow.generate(P, cond, lam, rng)


class PriorFlow:
    """Unconditional coupling stack with a standard-normal base over ``n_f`` dims."""

    def __init__(self, n_f: int, n_layers: int = 4, hidden: Sequence[int] = (64, 64),
                 scale_bound: float = 5.0, prefix: str = "prior"):
        self.n_f = n_f
        self.layers = [CouplingLayer(n_f, 0, k % 2, hidden, scale_bound, f"{prefix}.c{k}")
                       for k in range(n_layers)]

    def init_params(self, rng: np.random.Generator, zero_last: bool = True) -> dict[str, np.ndarray]:
        p: dict[str, np.ndarray] = {}
        for layer in self.layers:
            p.update(layer.init_params(rng, zero_last))
        return p

    def to_base(self, P, f):
        z = ops.as_tensor(f)
        if z.ndim != 2 or z.shape[1] != self.n_f:
            raise ValueError(f"prior expects (rows, {self.n_f}) codes, got {z.shape}")
        logdet = None
        for layer in self.layers:
            z, ld = layer.forward(P, z)
            logdet = ld if logdet is None else ops.add(logdet, ld)
        return z, (logdet if logdet is not None else ops.as_tensor(np.zeros(z.shape[0])))

    def log_density(self, P, f):
        z, logdet = self.to_base(P, f)
        return ops.add(standard_normal_logpdf(z, 1), logdet)

    def sample(self, P, rng: np.random.Generator | None = None, z=None, count: int = 1) -> np.ndarray:
        if z is None:
            z = rng.standard_normal((count, self.n_f))
        v = ops.as_tensor(z)
        for layer in reversed(self.layers):
            v = layer.inverse(P, v)
        return v.data


def prior_log_density(prior: PriorFlow, P, f):
    return prior.log_density(P, f)


def prior_sample(prior: PriorFlow, P, rng, count: int = 1) -> np.ndarray:
    return prior.sample(P, rng, count=count)
