"""Mini-batch training, checkpoints and the ablation suite."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ModelConfig, SDModel
from .numcore import AdamState, NonFiniteError, Tape, Tensor, adam_step
from .objective import LossConfig, LossNoise, shuffled_elbo_loss
from .rng import stream
from .worlds import SequenceDataset

MAGIC = b"SDFLOW01"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "total", "nll", "kl", "invariance_gap", "mcc_static", "leakage", "wall_ms")

VARIANTS = {
    "full": {"shuffle_enabled": True, "condition_enabled": True},
    "no_shuffle": {"shuffle_enabled": False, "condition_enabled": True},
    "unconditional": {"shuffle_enabled": True, "condition_enabled": False},
}


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint_path=None):
        self.step, self.reason, self.checkpoint_path = step, reason, checkpoint_path
        super().__init__(f"training aborted at step {step}: {reason}"
                         + (f" (last good checkpoint: {checkpoint_path})" if checkpoint_path else ""))


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    steps: int = 20000
    seed: int = 0
    eval_every: int = 1000
    eval_size: int = 512
    beta_warmup: bool = False
    n_f: int | None = None
    model: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    variant: str = "full"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = asdict(self.loss)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of everything that shapes the optimization trajectory except its length."""
        d = self.to_dict()
        for k in ("steps", "eval_every", "eval_size", "checkpoint_path"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, dataset: SequenceDataset) -> ModelConfig:
        n_f = self.n_f
        if n_f is None:
            n_f = dataset.spec.n_s if dataset.spec is not None else dataset.n // 2
        return ModelConfig(n=dataset.n, n_f=n_f, **{k: tuple(v) if isinstance(v, list) else v
                                                     for k, v in self.model.items()})


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState
    step: int
    fingerprint: str
    train_config: dict
    extra: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def model(self) -> SDModel:
        return SDModel(self.model_config)


@dataclass
class TrainLog:
    variant: str = "full"
    records: list[dict] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(record)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(["" if r.get(c) is None else _fmt(r[c]) for c in LOG_COLUMNS])


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (None if v == "" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- checkpoint I/O -----------------------------------------------------------

def _checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    sections, chunks, offset = [], [], 0
    opt = ckpt.optimizer
    for kind, source in (("param", ckpt.params), ("adam.m", opt.m), ("adam.v", opt.v)):
        for name in sorted(source):
            arr = np.ascontiguousarray(source[name], dtype="<f8")
            sections.append({"name": f"{kind}/{name}", "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format_version": ckpt.format_version,
        "step": ckpt.step,
        "fingerprint": ckpt.fingerprint,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "extra": ckpt.extra,
        "sections": sections,
        "payload_bytes": offset,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(hdr)) + hdr + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    _atomic_write(path, _checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt or truncated)")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = body[16 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload size mismatch")
    groups = {"param": {}, "adam.m": {}, "adam.v": {}}
    for sec in header["sections"]:
        kind, name = sec["name"].split("/", 1)
        count = int(np.prod(sec["shape"]))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=sec["offset"])
        groups[kind][name] = arr.astype(np.float64).reshape(sec["shape"])
    o = header["optimizer"]
    opt = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"], groups["adam.m"], groups["adam.v"])
    return ModelCheckpoint(ModelConfig.from_dict(header["model_config"]), groups["param"], opt,
                           header["step"], header["fingerprint"], header["train_config"], header["extra"],
                           header["format_version"])


# -- training -----------------------------------------------------------------

def batch_indices(seed: int, step: int, N: int, batch_size: int) -> np.ndarray:
    """Epoch-wise shuffled sequence indices for ``step`` (0-based); incomplete batches are dropped."""
    per_epoch = max(N // batch_size, 1)
    epoch, j = divmod(step, per_epoch)
    order = stream(seed, "data-order", epoch).permutation(N)
    return np.sort(order[j * batch_size:(j + 1) * batch_size])


def step_noise(seed: int, step: int, B: int, T: int, n_f: int, m: int) -> LossNoise:
    return LossNoise.draw(B, T, n_f, m, stream(seed, "code-noise", step),
                          stream(seed, "permutation", step), stream(seed, "prior-sampling", step))


def loss_and_grads(model: SDModel, params: dict, x: np.ndarray, loss_cfg: LossConfig,
                   noise: LossNoise, beta: float | None = None):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        out = shuffled_elbo_loss(model, leaves, x, loss_cfg, noise=noise, beta=beta)
    if not np.isfinite(out.total.data):
        raise NonFiniteError("loss")
    adj = tape.backward(out.total)
    grads = {k: np.array(np.broadcast_to(adj.get(id(t), 0.0), t.shape)) for k, t in leaves.items()}
    return out, grads


def init_checkpoint(cfg: TrainConfig, dataset: SequenceDataset) -> ModelCheckpoint:
    mc = cfg.model_config(dataset)
    params = SDModel(mc).init_params(cfg.seed)
    opt = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return ModelCheckpoint(mc, params, opt, 0, cfg.fingerprint(), cfg.to_dict(),
                           {"variant": cfg.variant, "data_epoch": 0, "data_position": 0})


def train(cfg: TrainConfig, dataset: SequenceDataset, resume: ModelCheckpoint | None = None,
          log_path=None, on_record: Callable[[dict], None] | None = None,
          diagnostics: bool = True) -> tuple[ModelCheckpoint, TrainLog]:
    """Run ``cfg.steps`` optimizer steps in total (counting steps already in ``resume``).

    Randomness at step ``k`` depends only on ``(cfg.seed, k)``, so a resumed
    run continues bit-identically.
    """
    if cfg.batch_size > dataset.N:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {dataset.N}")
    ckpt = resume if resume is not None else init_checkpoint(cfg, dataset)
    if ckpt.fingerprint != cfg.fingerprint():
        raise CheckpointError("checkpoint fingerprint does not match the training config")
    expected = cfg.model_config(dataset)
    if ckpt.model_config != expected:
        raise ValueError(f"dataset/model mismatch: checkpoint {ckpt.model_config}, dataset implies {expected}")
    model = SDModel(ckpt.model_config)
    params, opt = ckpt.params, ckpt.optimizer
    log = TrainLog(variant=cfg.variant)
    B, T, n_f = cfg.batch_size, dataset.T, model.config.n_f
    m = cfg.loss.kl_mc_samples
    warm = max(int(0.1 * cfg.steps), 1)
    start = time.perf_counter()
    window: list[tuple[float, float, float]] = []
    ckpt_path = Path(cfg.checkpoint_path) if cfg.checkpoint_path else None
    eval_set = dataset.subset(np.arange(min(cfg.eval_size, dataset.N)))

    def snapshot(step, p, o):
        per_epoch = max(dataset.N // B, 1)
        return ModelCheckpoint(model.config, p, o, step, cfg.fingerprint(), cfg.to_dict(),
                               {"variant": cfg.variant, "data_epoch": step // per_epoch,
                                "data_position": step % per_epoch})

    for step in range(ckpt.step, cfg.steps):
        idx = batch_indices(cfg.seed, step, dataset.N, B)
        noise = step_noise(cfg.seed, step, B, T, n_f, m)
        beta = cfg.loss.beta * min(1.0, (step + 1) / warm) if cfg.beta_warmup else None
        try:
            out, grads = loss_and_grads(model, params, dataset.x[idx], cfg.loss, noise, beta)
            new_params, new_opt = adam_step(params, grads, opt)
        except NonFiniteError as exc:
            if ckpt_path is not None:
                save_checkpoint(snapshot(step, params, opt), ckpt_path)
            raise TrainingAborted(step, str(exc), ckpt_path) from exc
        params, opt = new_params, new_opt
        vals = (float(out.total.data), out.nll, out.kl)
        log.total.append(vals[0])
        log.nll.append(vals[1])
        log.kl.append(vals[2])
        window.append(vals)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            rec = {"step": done, "total": float(np.mean([w[0] for w in window])),
                   "nll": float(np.mean([w[1] for w in window])),
                   "kl": float(np.mean([w[2] for w in window])),
                   "invariance_gap": None, "mcc_static": None, "leakage": None,
                   "wall_ms": (time.perf_counter() - start) * 1000.0}
            if diagnostics:
                rec.update(_diagnostics(model, params, eval_set))
            window = []
            log.append(rec)
            if on_record:
                on_record(rec)
    final = snapshot(max(cfg.steps, ckpt.step), params, opt)
    if ckpt_path is not None:
        save_checkpoint(final, ckpt_path)
    if log_path is not None:
        log.write_csv(log_path)
    return final, log


def _diagnostics(model: SDModel, params, ds: SequenceDataset) -> dict:
    from . import evalkit

    out = {"invariance_gap": evalkit.invariance_gap_params(model, params, ds.x)}
    if ds.has_truth:
        f = model.static_code(params, ds.x).mean
        out["mcc_static"] = evalkit.mcc(f, ds.s)
        lam = model.dynamic_codes(params, ds.x, f)
        out["leakage"] = evalkit.lambda_to_static_r2(lam, ds.s)
    return out


def run_ablation_suite(cfg: TrainConfig, dataset: SequenceDataset, out_dir=None,
                       variants=tuple(VARIANTS), **train_kwargs) -> dict[str, tuple[ModelCheckpoint, TrainLog]]:
    """Train each variant with identical seed, data order and noise streams."""
    results = {}
    for name in variants:
        loss = replace(cfg.loss, **VARIANTS[name])
        vcfg = replace(cfg, loss=loss, variant=name)
        log_path = None
        if out_dir is not None:
            vdir = Path(out_dir) / name
            vdir.mkdir(parents=True, exist_ok=True)
            vcfg = replace(vcfg, checkpoint_path=str(vdir / "checkpoint.sdf"))
            log_path = vdir / "train_log.csv"
        results[name] = train(vcfg, dataset, log_path=log_path, **train_kwargs)
    return results
