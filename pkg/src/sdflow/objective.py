"""KL terms and the shuffled negative ELBO."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import GaussianCode, aggregate_time, encode_frame, random_permutations, reparameterize, shuffle_codes
from .flows import HALF_LOG_2PI, PriorFlow
from .numcore import Tensor, ops

PRIOR_MODES = ("flow", "standard_normal")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    prior_mode: str = "flow"
    kl_mc_samples: int = 1
    shuffle_enabled: bool = True
    condition_enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.kl_mc_samples < 1:
            raise ValueError("kl_mc_samples must be >= 1")


@dataclass
class LossBreakdown:
    total: Tensor
    nll: float
    kl: float
    per_sequence: np.ndarray
    nll_per_sequence: np.ndarray
    kl_per_sequence: np.ndarray


@dataclass
class LossNoise:
    """All randomness consumed by one loss evaluation."""

    frame_eta: np.ndarray  # (B, T, n_f) per-frame code samples
    perms: np.ndarray  # (B, T) time permutations
    kl_eta: np.ndarray  # (B, m, n_f) samples of the aggregated code

    @classmethod
    def draw(cls, B: int, T: int, n_f: int, m: int, code_rng, perm_rng=None, prior_rng=None) -> "LossNoise":
        perm_rng = perm_rng or code_rng
        prior_rng = prior_rng or code_rng
        return cls(code_rng.standard_normal((B, T, n_f)), random_permutations(perm_rng, B, T),
                   prior_rng.standard_normal((B, m, n_f)))


def kl_gaussian_standard(code: GaussianCode):
    """``KL(N(mean, exp(logvar)) || N(0, I))`` summed over the last axis."""
    term = ops.sub(ops.add(ops.exp(code.logvar), ops.square(code.mean)), ops.add(code.logvar, 1.0))
    return ops.mul(ops.sum(term, axis=-1), 0.5)


def _gaussian_logpdf_from_eta(logvar, eta: np.ndarray):
    # log q(mean + sigma * eta) = -1/2 sum(eta^2 + logvar + log 2 pi)
    n_f = eta.shape[-1]
    lv_sum = ops.sum(logvar, axis=-1)
    return ops.sub(ops.mul(ops.add(lv_sum, np.sum(eta * eta, axis=-1)), -0.5), n_f * HALF_LOG_2PI)


def kl_flow_prior_samples(code: GaussianCode, prior: PriorFlow, P, eta: np.ndarray):
    """Monte-Carlo ``KL(q || prior)`` per row; ``code`` is ``(B, n_f)``, ``eta`` is ``(B, m, n_f)``."""
    B, m, n_f = eta.shape
    mean = ops.reshape(code.mean, (B, 1, n_f))
    logvar = ops.reshape(code.logvar, (B, 1, n_f))
    f = ops.add(mean, ops.mul(ops.exp(ops.mul(logvar, 0.5)), eta))
    log_q = _gaussian_logpdf_from_eta(logvar, eta)  # (B, m)
    log_p = ops.reshape(prior.log_density(P, ops.reshape(f, (B * m, n_f))), (B, m))
    return ops.mul(ops.sum(ops.sub(log_q, log_p), axis=1), 1.0 / m)


def kl_vs_flow_prior(code: GaussianCode, prior: PriorFlow, P, m: int, rng: np.random.Generator):
    """Monte-Carlo KL estimate for a single code of shape ``(n_f,)`` using ``m`` samples."""
    mean = ops.reshape(code.mean, (1, -1))
    logvar = ops.reshape(code.logvar, (1, -1))
    eta = rng.standard_normal((1, m, mean.shape[1]))
    return ops.reshape(kl_flow_prior_samples(GaussianCode(mean, logvar), prior, P, eta), ())


def shuffled_elbo_loss(model, P, x, cfg: LossConfig, rng: np.random.Generator | None = None,
                       noise: LossNoise | None = None, beta: float | None = None) -> LossBreakdown:
    """Batch mean of ``alpha * nll + beta * kl``.

    ``nll`` is the negative flow log-likelihood of each whole sequence, with the
    flow conditioned on the time-shuffled per-frame code samples (full model),
    on one sample of the aggregated code broadcast over time
    (``shuffle_enabled=False``) or on zeros (``condition_enabled=False``).
    ``kl`` compares the aggregated code with the prior. ``beta`` overrides
    ``cfg.beta`` (warm-up schedules).
    """
    x = ops.as_tensor(x)
    B, T, _ = x.shape
    n_f = model.config.n_f
    if noise is None:
        noise = LossNoise.draw(B, T, n_f, cfg.kl_mc_samples, rng)
    beta = cfg.beta if beta is None else beta

    frames = encode_frame(model.encoder, P, x)
    agg = aggregate_time(frames, axis=1)

    if cfg.prior_mode == "flow":
        kl = kl_flow_prior_samples(agg, model.prior, P, noise.kl_eta)
    else:
        kl = kl_gaussian_standard(agg)

    if not cfg.condition_enabled:
        cond = np.zeros((B, T, n_f))
    elif cfg.shuffle_enabled:
        cond = shuffle_codes(reparameterize(frames, noise.frame_eta), noise.perms)
    else:
        f = reparameterize(agg, noise.kl_eta[:, 0, :])
        cond = ops.broadcast_to(ops.reshape(f, (B, 1, n_f)), (B, T, n_f))

    nll = ops.neg(model.flow.log_likelihood(P, x, cond))
    nll_mean = ops.mul(ops.sum(nll), 1.0 / B)
    kl_mean = ops.mul(ops.sum(kl), 1.0 / B)
    total = ops.add(ops.mul(nll_mean, cfg.alpha), ops.mul(kl_mean, beta))
    per_seq = cfg.alpha * nll.data + beta * kl.data
    return LossBreakdown(total, float(nll_mean.data), float(kl_mean.data), per_seq, nll.data, kl.data)
