"""Disentanglement metrics against exact ground truth.

The probes answer "is the learned code a reparametrization of the factor?":
MCC is a linear lower bound under an optimal one-to-one matching, the
random-feature ridge probe catches nonlinear reparametrizations.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import SDModel
from .rng import stream
from .worlds import SequenceDataset, World

REPORT_SCHEMA_VERSION = 1
RIDGE = 1e-3
N_FEATURES = 256


class DegenerateColumnWarning(UserWarning):
    pass


# -- codes --------------------------------------------------------------------

@dataclass
class CodesTable:
    f_mean: np.ndarray  # (N, n_f) aggregated code mean
    f_logvar: np.ndarray
    f_sample: np.ndarray
    frame_mean: np.ndarray  # (N, T, n_f)
    frame_logvar: np.ndarray
    lam: np.ndarray  # (N, T, n)
    s: np.ndarray | None = None
    eps_d: np.ndarray | None = None
    masks: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.f_mean.shape[0]

    def innovations(self) -> np.ndarray:
        """Exogenous noise that actually entered the dynamics: ``A_t * eps_d[t]`` (all of ``eps_d[1]``)."""
        active = np.concatenate([np.ones_like(self.masks[:, :1]), self.masks], axis=1).astype(bool)
        return np.where(active, self.eps_d, 0.0)


def encode_dataset(ckpt, dataset: SequenceDataset, use_mean: bool = True, seed: int = 0,
                   chunk: int = 1024) -> CodesTable:
    """Static and dynamic codes for every sequence.

    Dynamic codes use evaluation-time conditioning: the aggregated code (its
    mean, or one sample when ``use_mean`` is false) broadcast over time.
    """
    model = SDModel(ckpt.model_config)
    if dataset.n != model.config.n:
        raise ValueError(f"dataset frames have dimension {dataset.n}, model expects {model.config.n}")
    P = ckpt.params
    parts = []
    eta = stream(seed, "eval-sample").standard_normal((dataset.N, model.config.n_f))
    for lo in range(0, dataset.N, chunk):
        x = dataset.x[lo:lo + chunk]
        frames = model.frame_codes(P, x)
        agg = model.static_code(P, x)
        sample = agg.mean + np.exp(0.5 * agg.logvar) * eta[lo:lo + chunk]
        lam = model.dynamic_codes(P, x, agg.mean if use_mean else sample)
        parts.append((agg.mean, agg.logvar, sample, frames.mean, frames.logvar, lam))
    cols = [np.concatenate(c, axis=0) for c in zip(*parts)]
    masks = None if dataset.masks is None else dataset.masks.astype(bool)
    return CodesTable(*cols, s=dataset.s, eps_d=dataset.eps_d, masks=masks)


# -- correlation / probes -----------------------------------------------------

def _abs_corr(learned: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """|Pearson| matrix (p, q); zero-variance columns get correlation 0."""
    a = learned - learned.mean(0)
    b = truth - truth.mean(0)
    sa, sb = np.sqrt((a * a).sum(0)), np.sqrt((b * b).sum(0))
    bad_a, bad_b = sa < 1e-12, sb < 1e-12
    if bad_a.any() or bad_b.any():
        warnings.warn("zero-variance column(s); their correlations are set to 0", DegenerateColumnWarning)
    sa, sb = np.where(bad_a, 1.0, sa), np.where(bad_b, 1.0, sb)
    c = np.abs((a.T @ b) / np.outer(sa, sb))
    c[bad_a, :] = 0.0
    c[:, bad_b] = 0.0
    return np.clip(c, 0.0, 1.0)


def mcc(learned, truth) -> float:
    """Mean |correlation| under the best one-to-one matching of truth to learned columns."""
    learned = np.asarray(learned, dtype=np.float64).reshape(len(learned), -1)
    truth = np.asarray(truth, dtype=np.float64).reshape(len(truth), -1)
    N, p = learned.shape
    q = truth.shape[1]
    if N <= 10:
        raise ValueError("mcc needs more than 10 samples")
    if p < q:
        raise ValueError(f"learned code has {p} columns, fewer than the {q} true factors")
    c = _abs_corr(learned, truth)
    if q <= 6 and math.perm(p, q) <= 50_000:
        best = max(sum(c[a, j] for j, a in enumerate(assign))
                   for assign in itertools.permutations(range(p), q))
        return float(best / q)
    rows, cols = linear_sum_assignment(1.0 - c)
    return float(c[rows, cols].mean())


def _split(n_units: int, seed: int):
    order = stream(seed, "probe-split").permutation(n_units)
    cut = int(round(0.8 * n_units))
    return np.sort(order[:cut]), np.sort(order[cut:])


def _ridge_fit_predict(Xtr, ytr, Xte, lam=RIDGE):
    mx, my = Xtr.mean(0), ytr.mean(0)
    A, b = Xtr - mx, ytr - my
    w = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ b)
    return (Xte - mx) @ w + my


def median_pairwise_distance(X: np.ndarray, seed: int = 0, max_points: int = 1000) -> float:
    if len(X) > max_points:
        X = X[stream(seed, "bandwidth").choice(len(X), max_points, replace=False)]
    sq = (X * X).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    iu = np.triu_indices(len(X), 1)
    return float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 1.0


def random_fourier_features(X, bandwidth: float, n_features: int = N_FEATURES, seed: int = 0):
    rng = stream(seed, "rff")
    W = rng.standard_normal((X.shape[1], n_features)) / max(bandwidth, 1e-12)
    b = rng.uniform(0.0, 2.0 * np.pi, n_features)
    return lambda Z: np.sqrt(2.0 / n_features) * np.cos(Z @ W + b)


def probe_r2(inputs, targets, mode: str = "linear", seed: int = 0, groups=None) -> np.ndarray:
    """Held-out R^2 of a ridge probe, one value per target column.

    ``mode`` is ``linear`` (raw inputs) or ``random_features`` (256 random
    Fourier features, bandwidth = median pairwise distance). Rows sharing a
    ``groups`` label land on the same side of the 80/20 split.
    """
    X = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    Y = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if groups is None:
        tr, te = _split(len(X), seed)
    else:
        groups = np.asarray(groups)
        units = np.unique(groups)
        gtr, _ = _split(len(units), seed)
        in_tr = np.isin(groups, units[gtr])
        tr, te = np.flatnonzero(in_tr), np.flatnonzero(~in_tr)
    if mode == "random_features":
        phi = random_fourier_features(X[tr], median_pairwise_distance(X[tr], seed), seed=seed)
        Ftr, Fte = phi(X[tr]), phi(X[te])
    elif mode == "linear":
        Ftr, Fte = X[tr], X[te]
    else:
        raise ValueError(f"unknown probe mode {mode!r}")
    pred = _ridge_fit_predict(Ftr, Y[tr], Fte)
    out = np.zeros(Y.shape[1])
    for j in range(Y.shape[1]):
        yt = Y[te, j]
        ss_tot = float(((yt - yt.mean()) ** 2).sum())
        if ss_tot < 1e-12 or np.ptp(Y[:, j]) < 1e-12:
            warnings.warn(f"target column {j} is constant; R^2 set to 0", DegenerateColumnWarning)
            continue
        out[j] = 1.0 - float(((yt - pred[:, j]) ** 2).sum()) / ss_tot
    return out


# -- invariance / leakage -----------------------------------------------------

def symmetric_kl(m1, lv1, m2, lv2) -> np.ndarray:
    """``KL(p||q) + KL(q||p)`` between diagonal Gaussians, summed over the last axis."""
    v1, v2 = np.exp(lv1), np.exp(lv2)
    dm2 = (m1 - m2) ** 2
    return 0.5 * np.sum(v1 / v2 + v2 / v1 - 2.0 + dm2 * (1.0 / v1 + 1.0 / v2), axis=-1)


def invariance_gap_codes(frame_mean, frame_logvar, per_sequence: bool = False):
    """Mean symmetric KL between per-frame codes over all frame pairs ``t != t'``."""
    m, lv = np.asarray(frame_mean), np.asarray(frame_logvar)
    T = m.shape[1]
    if T < 2:
        raise ValueError("invariance gap needs T >= 2")
    i, j = np.triu_indices(T, 1)
    per = symmetric_kl(m[:, i], lv[:, i], m[:, j], lv[:, j]).mean(axis=1)
    return per if per_sequence else float(per.mean())


def invariance_gap_params(model: SDModel, params, x) -> float:
    codes = model.frame_codes(params, x)
    return invariance_gap_codes(codes.mean, codes.logvar)


def invariance_gap(ckpt, dataset: SequenceDataset) -> float:
    return invariance_gap_params(SDModel(ckpt.model_config), ckpt.params, dataset.x)


def lambda_to_static_r2(lam, s, seed: int = 0) -> float:
    """Nonlinear-probe R^2 of ``s`` from per-frame dynamic codes (frames pooled)."""
    N, T, n = lam.shape
    groups = np.repeat(np.arange(N), T)
    targets = np.repeat(np.asarray(s), T, axis=0)
    return float(np.mean(probe_r2(lam.reshape(N * T, n), targets, "random_features", seed, groups)))


def leakage_scores(codes: CodesTable, seed: int = 0) -> tuple[float, float]:
    """``(lambda -> s R^2, f -> time-averaged |innovation| R^2)``; low is good."""
    if codes.s is None:
        raise ValueError("leakage needs ground truth")
    lam_s = lambda_to_static_r2(codes.lam, codes.s, seed)
    summary = np.abs(codes.innovations()).mean(axis=1)
    f_eps = float(np.mean(probe_r2(codes.f_mean, summary, "random_features", seed)))
    return lam_s, f_eps


def dynamic_probe_r2(codes: CodesTable, seed: int = 0) -> float:
    N, T, n = codes.lam.shape
    inn = codes.innovations()
    groups = np.repeat(np.arange(N), T)
    r2 = probe_r2(codes.lam.reshape(N * T, n), inn.reshape(N * T, -1), "random_features", seed, groups)
    return float(np.mean(r2))


# -- swap / generation ----------------------------------------------------------

def _pearson(a, b) -> float:
    a, b = np.ravel(a) - np.mean(a), np.ravel(b) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 1e-300 else 0.0


def _mean_dim_corr(a, b) -> float:
    a, b = a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])
    return float(np.mean([_pearson(a[:, i], b[:, i]) for i in range(a.shape[1])]))


def swap_experiment(ckpt, seq_a, seq_b, n_boot: int = 1000, seed: int = 0) -> dict:
    """Generate with B's static code and A's dynamic codes, then re-encode.

    ``seq_a`` and ``seq_b`` are ``(P, T, n)`` batches of pairs (or single
    ``(T, n)`` sequences). Correlations are taken across pairs, per code
    dimension, and averaged.
    """
    model, P = SDModel(ckpt.model_config), ckpt.params
    xa, xb = np.asarray(seq_a, dtype=np.float64), np.asarray(seq_b, dtype=np.float64)
    if xa.ndim == 2:
        xa, xb = xa[None], xb[None]
    if xa.shape != xb.shape:
        raise ValueError(f"swap pairs need equal shapes, got {xa.shape} and {xb.shape}")
    fa, fb = model.static_code(P, xa).mean, model.static_code(P, xb).mean
    lam_a = model.dynamic_codes(P, xa, fa)
    x_hat = model.generate(P, fb, lam_a)
    f_hat = model.static_code(P, x_hat).mean
    lam_hat = model.dynamic_codes(P, x_hat, f_hat)
    out = {
        "pairs": int(xa.shape[0]),
        "static_mse": float(np.mean((f_hat - fb) ** 2)),
        "dynamic_mse": float(np.mean((lam_hat - lam_a) ** 2)),
        "static_consistency": None, "static_ci": None, "dynamic_consistency": None,
        "x_hat": x_hat,
    }
    if xa.shape[0] > 2:
        out["static_consistency"] = _mean_dim_corr(f_hat, fb)
        out["dynamic_consistency"] = _mean_dim_corr(lam_hat, lam_a)
        rng = stream(seed, "bootstrap")
        boots = []
        for _ in range(n_boot):
            idx = rng.integers(0, xa.shape[0], xa.shape[0])
            boots.append(_mean_dim_corr(f_hat[idx], fb[idx]))
        out["static_ci"] = [float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5))]
    return out


def generation_fidelity(ckpt, dataset: SequenceDataset, world: World, m_g: int = 8,
                        rng: np.random.Generator | None = None, n_seq: int = 200,
                        lambdas: np.ndarray | None = None) -> dict:
    """Fix each sequence's static code, sample dynamic codes, decode, and unmix exactly.

    ``static_preservation = -(err + spread)`` with ``err`` the mean squared
    distance of the recovered static factors from the true ones, normalized by
    the expected distance between two independent draws, and ``spread`` their
    normalized variance over time; 0 is perfect. ``dynamic_diversity`` is the
    mean standard deviation of the recovered dynamic factors across the
    ``m_g`` samples. ``random_baseline`` repeats ``err`` against a shuffled
    assignment of true static factors.
    """
    if not dataset.has_truth:
        raise ValueError("generation fidelity needs a dataset with ground truth")
    model, P = SDModel(ckpt.model_config), ckpt.params
    rng = rng or stream(0, "generation")
    idx = np.arange(min(n_seq, dataset.N))
    x, s = dataset.x[idx], dataset.s[idx]
    S, T, n = x.shape
    f = model.static_code(P, x).mean
    if lambdas is None:
        lambdas = rng.standard_normal((S, m_g, T, n))
    lambdas = np.asarray(lambdas, dtype=np.float64)
    m_g = lambdas.shape[1]
    x_hat = model.generate(P, np.repeat(f, m_g, axis=0), lambdas.reshape(S * m_g, T, n))
    s_hat, d_hat = world.unmix(x_hat)
    s_hat = s_hat.reshape(S, m_g, T, -1)
    d_hat = d_hat.reshape(S, m_g, T, -1)
    scale = float(np.sum(np.var(dataset.s, axis=0)))
    err = np.sum((s_hat - s[:, None, None, :]) ** 2, axis=-1).mean(axis=-1) / (2.0 * scale)
    spread = np.sum(np.var(s_hat, axis=2), axis=-1) / scale
    shuffled = s[stream(0, "baseline").permutation(S)]
    base = np.sum((s_hat - shuffled[:, None, None, :]) ** 2, axis=-1).mean(axis=-1) / (2.0 * scale)
    return {
        "static_preservation": float(-(err + spread).mean()),
        "dynamic_diversity": float(np.std(d_hat, axis=1).mean()),
        "random_baseline": float(-(base + spread).mean()),
    }


# -- reports --------------------------------------------------------------------

@dataclass
class MetricsReport:
    mcc_static: float | None = None
    probe_r2_static_linear: float | None = None
    probe_r2_static_nonlinear: float | None = None
    probe_r2_dynamic: float | None = None
    leakage_lambda_to_s: float | None = None
    leakage_f_to_eps: float | None = None
    invariance_gap: float | None = None
    swap_consistency: float | None = None
    generation_static_preservation: float | None = None
    generation_dynamic_diversity: float | None = None
    seeds: dict = field(default_factory=dict)
    config_fingerprints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **asdict(self)}


_NUM = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"] + [f.name for f in fields(MetricsReport)],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        **{f.name: _NUM for f in fields(MetricsReport) if f.name not in ("seeds", "config_fingerprints")},
        "seeds": {"type": "object"},
        "config_fingerprints": {"type": "object"},
    },
}


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)


def write_report(report: MetricsReport, path) -> Path:
    doc = report.to_dict()
    validate_report(doc)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_report(path) -> MetricsReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    validate_report(doc)
    doc.pop("schema_version")
    return MetricsReport(**doc)


def write_sequence_csv(codes: CodesTable, path) -> None:
    gap = invariance_gap_codes(codes.frame_mean, codes.frame_logvar, per_sequence=True)
    n_f = codes.f_mean.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "invariance_gap"] + [f"f_mean_{i}" for i in range(n_f)])
        for i in range(codes.N):
            w.writerow([i, repr(float(gap[i]))] + [repr(float(v)) for v in codes.f_mean[i]])


def evaluate(ckpt, dataset: SequenceDataset, world: World | None = None, seed: int = 0,
             n_swap: int = 100, m_g: int = 8, n_gen: int = 200) -> MetricsReport:
    """Every metric that the data supports; unavailable ones stay ``None``."""
    codes = encode_dataset(ckpt, dataset, use_mean=True, seed=seed)
    rep = MetricsReport(invariance_gap=invariance_gap_codes(codes.frame_mean, codes.frame_logvar),
                        seeds={"eval": seed, "train": ckpt.train_config.get("seed")},
                        config_fingerprints={"train": ckpt.fingerprint,
                                             "data": dataset.fingerprint})
    if dataset.has_truth:
        rep.mcc_static = mcc(codes.f_mean, codes.s)
        rep.probe_r2_static_linear = float(np.mean(probe_r2(codes.f_mean, codes.s, "linear", seed)))
        rep.probe_r2_static_nonlinear = float(np.mean(probe_r2(codes.f_mean, codes.s, "random_features", seed)))
        rep.probe_r2_dynamic = dynamic_probe_r2(codes, seed)
        rep.leakage_lambda_to_s, rep.leakage_f_to_eps = leakage_scores(codes, seed)
    if dataset.N >= 2 * n_swap:
        rng = stream(seed, "swap-pairs")
        perm = rng.permutation(dataset.N)
        rep.swap_consistency = swap_experiment(ckpt, dataset.x[perm[:n_swap]],
                                               dataset.x[perm[n_swap:2 * n_swap]], seed=seed)["static_consistency"]
    if world is not None and dataset.has_truth and world.spec.observation_noise_std == 0:
        gen = generation_fidelity(ckpt, dataset, world, m_g, stream(seed, "generation"), n_gen)
        rep.generation_static_preservation = gen["static_preservation"]
        rep.generation_dynamic_diversity = gen["dynamic_diversity"]
    return rep
