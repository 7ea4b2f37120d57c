"""Command-line pipeline: ``sdflow <verb> --config run.json``.

Verbs: gen-data, train, eval, sample, swap, ablate. Exit status is 0 on
success, 1 for invalid configs or missing inputs, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import jsonschema

CONFIG_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VERBS = ("gen-data", "train", "eval", "sample", "swap", "ablate")


class ConfigError(Exception):
    """All problems found in a run config, each prefixed by its field path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InputMissing(Exception):
    pass


def _int(minimum=None):
    d = {"type": "integer"}
    if minimum is not None:
        d["minimum"] = minimum
    return d


def _num(**bounds):
    return {"type": "number", **bounds}


_HIDDEN = {"type": "array", "items": _int(1), "minItems": 1}
_BOOL = {"type": "boolean"}

SECTIONS = {
    "world": {
        "n_s": (_int(1), 2), "n_d": (_int(1), 2), "T": (_int(2), 8), "N": (_int(1), 5000),
        "coupling_mode": ({"enum": ["independent", "causal_scale", "causal_bounce"]}, "independent"),
        "mask_rate": (_num(exclusiveMinimum=0, maximum=1), 0.75), "mixing_depth": (_int(0), 3),
        "observation_noise_std": (_num(minimum=0), 0.0), "seed": (_int(0), 0),
    },
    "model": {
        "n_f": ({"type": ["integer", "null"], "minimum": 1}, None), "enc_hidden": (_HIDDEN, [64, 64]),
        "flow_layers": (_int(1), 4), "cond_hidden": (_HIDDEN, [64, 64]), "rnn_width": (_int(1), 64),
        "ctx_dim": (_int(0), 32), "prior_layers": (_int(1), 4), "prior_hidden": (_HIDDEN, [64, 64]),
        "scale_bound": (_num(exclusiveMinimum=0), 5.0),
    },
    "loss": {
        "alpha": (_num(exclusiveMinimum=0), 1.0), "beta": (_num(minimum=0), 0.01),
        "prior_mode": ({"enum": ["flow", "standard_normal"]}, "flow"), "kl_mc_samples": (_int(1), 1),
        "shuffle_enabled": (_BOOL, True), "condition_enabled": (_BOOL, True),
    },
    "train": {
        "lr": (_num(exclusiveMinimum=0), 1e-3), "beta1": (_num(minimum=0, exclusiveMaximum=1), 0.9),
        "beta2": (_num(minimum=0, exclusiveMaximum=1), 0.999), "eps": (_num(exclusiveMinimum=0), 1e-8),
        "batch_size": (_int(1), 64), "steps": (_int(1), 20000), "seed": (_int(0), 0),
        "eval_every": (_int(1), 1000), "eval_size": (_int(1), 512), "beta_warmup": (_BOOL, False),
        "variant": ({"enum": ["full", "no_shuffle", "unconditional"]}, "full"),
    },
    "eval": {
        "seed": (_int(0), 0), "n_swap": (_int(1), 100), "m_g": (_int(1), 8), "n_gen": (_int(1), 200),
        "sample_count": (_int(1), 100), "swap_pairs": (_int(3), 100),
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version"],
    "properties": {
        "format_version": {"const": CONFIG_VERSION},
        "output_dir": {"type": ["string", "null"]},
        **{name: {"type": "object", "additionalProperties": False,
                  "properties": {k: spec for k, (spec, _) in sec.items()}}
           for name, sec in SECTIONS.items()},
    },
}


def default_config() -> dict:
    cfg = {"format_version": CONFIG_VERSION, "output_dir": None}
    for name, sec in SECTIONS.items():
        cfg[name] = {k: copy.deepcopy(default) for k, (_, default) in sec.items()}
    return cfg


def _path_of(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        return ".".join(parts + extra[:1]) or "<root>"
    if err.validator == "required":
        return ".".join(parts + [err.message.split("'")[1]])
    return ".".join(parts) or "<root>"


def validate_config(doc) -> dict:
    """Return the normalized config (defaults filled) or raise :class:`ConfigError` with every problem."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = [f"{_path_of(e)}: {e.message}"
              for e in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))]
    if errors:
        raise ConfigError(errors)
    cfg = default_config()
    cfg["output_dir"] = doc.get("output_dir")
    for name in SECTIONS:
        cfg[name].update(copy.deepcopy(doc.get(name, {})))
    return cfg


def parse_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputMissing(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    return validate_config(doc)


# -- building library objects from a config ---------------------------------------

def world_spec(cfg):
    from .worlds import WorldSpec
    return WorldSpec(**cfg["world"])


def train_config(cfg, checkpoint_path=None):
    from .objective import LossConfig
    from .trainer import TrainConfig

    model = dict(cfg["model"])
    n_f = model.pop("n_f")
    return TrainConfig(loss=LossConfig(**cfg["loss"]), n_f=n_f, model=model,
                       checkpoint_path=None if checkpoint_path is None else str(checkpoint_path),
                       **cfg["train"])


def apply_seed(cfg: dict, seed: int) -> dict:
    cfg = copy.deepcopy(cfg)
    for name in ("world", "train", "eval"):
        cfg[name]["seed"] = seed
    return cfg


# -- commands -----------------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, out: Path, args):
        self.cfg, self.out, self.args = cfg, out, args
        self.data_dir = Path(args.data) if args.data else out / "data"
        self.ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.sdf"

    def info(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg, file=sys.stderr)

    def need(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise InputMissing(f"{what} not found: {path}")
        return path

    def dataset(self):
        from .worlds import read_dataset
        return read_dataset(self.need(self.data_dir, "dataset directory"))

    def checkpoint(self):
        from .trainer import load_checkpoint
        return load_checkpoint(self.need(self.ckpt_path, "checkpoint"))

    def progress(self):
        from .trainer import LOG_COLUMNS
        if self.args.quiet:
            return None
        print(",".join(LOG_COLUMNS), flush=True)

        def emit(rec):
            print(",".join("" if rec.get(c) is None else f"{rec[c]:.6g}" for c in LOG_COLUMNS), flush=True)
        return emit

    # verbs

    def gen_data(self):
        from .worlds import generate_dataset, write_dataset
        ds = generate_dataset(world_spec(self.cfg))
        write_dataset(ds, self.data_dir)
        self.info(f"wrote {ds.N} sequences to {self.data_dir}")

    def train(self):
        from .trainer import load_checkpoint, train
        ds = self.dataset()
        tcfg = train_config(self.cfg, self.ckpt_path)
        if tcfg.batch_size > ds.N:
            raise ConfigError([f"train.batch_size: {tcfg.batch_size} exceeds dataset size {ds.N}"])
        resume = load_checkpoint(self.ckpt_path) if self.args.resume and self.ckpt_path.exists() else None
        ckpt, _ = train(tcfg, ds, resume=resume, log_path=self.out / "train_log.csv", on_record=self.progress())
        self.info(f"checkpoint at step {ckpt.step} written to {self.ckpt_path}")

    def _evaluate(self, ckpt, ds, out_dir: Path):
        from .evalkit import encode_dataset, evaluate, write_report, write_sequence_csv
        from .worlds import make_world
        e = self.cfg["eval"]
        world = make_world(ds.spec) if ds.spec is not None else None
        n_swap = min(e["n_swap"], ds.N // 2)
        rep = evaluate(ckpt, ds, world, seed=e["seed"], n_swap=max(n_swap, 1), m_g=e["m_g"], n_gen=e["n_gen"])
        write_report(rep, out_dir / "metrics.json")
        write_sequence_csv(encode_dataset(ckpt, ds, seed=e["seed"]), out_dir / "sequence_scores.csv")
        return rep

    def eval(self):
        ckpt, ds = self.checkpoint(), self.dataset()
        self._evaluate(ckpt, ds, self.out)
        self.info(f"metrics written to {self.out / 'metrics.json'}")

    def sample(self):
        import hashlib

        import numpy as np

        from .rng import stream
        ckpt = self.checkpoint()
        model, P = ckpt.model, ckpt.params
        e = self.cfg["eval"]
        count, T = e["sample_count"], self.cfg["world"]["T"]
        f = model.prior.sample(P, stream(e["seed"], "sample-static"), count=count)
        lam = stream(e["seed"], "sample-dynamic").standard_normal((count, T, model.config.n))
        x = model.generate(P, f, lam)
        raw = np.ascontiguousarray(x, dtype="<f8").tobytes()
        (self.out / "samples.f64").write_bytes(raw)
        manifest = {"format_version": 1, "dtype": "f64le", "file": "samples.f64", "shape": list(x.shape),
                    "sha256": hashlib.sha256(raw).hexdigest(), "checkpoint_fingerprint": ckpt.fingerprint,
                    "checkpoint_step": ckpt.step, "seed": e["seed"],
                    "static_codes": np.asarray(f).tolist()}
        (self.out / "samples_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.info(f"wrote {count} sampled sequences to {self.out / 'samples.f64'}")

    def swap(self):
        from .evalkit import swap_experiment
        from .rng import stream
        ckpt, ds = self.checkpoint(), self.dataset()
        e = self.cfg["eval"]
        pairs = min(e["swap_pairs"], ds.N // 2)
        if pairs < 3:
            raise ConfigError([f"eval.swap_pairs: dataset with {ds.N} sequences cannot supply 3 pairs"])
        perm = stream(e["seed"], "swap-pairs").permutation(ds.N)
        res = swap_experiment(ckpt, ds.x[perm[:pairs]], ds.x[perm[pairs:2 * pairs]], seed=e["seed"])
        res.pop("x_hat")
        res.update(seed=e["seed"], checkpoint_fingerprint=ckpt.fingerprint, dataset_fingerprint=ds.fingerprint)
        (self.out / "swap_report.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        self.info(f"static consistency {res['static_consistency']:.4f} over {pairs} pairs")

    def ablate(self):
        from .trainer import run_ablation_suite
        ds = self.dataset()
        tcfg = train_config(self.cfg)
        if tcfg.batch_size > ds.N:
            raise ConfigError([f"train.batch_size: {tcfg.batch_size} exceeds dataset size {ds.N}"])
        results = run_ablation_suite(tcfg, ds, out_dir=self.out, on_record=self.progress())
        for name, (ckpt, _) in results.items():
            self._evaluate(ckpt, ds, self.out / name)
            self.info(f"{name}: artifacts in {self.out / name}")


def _resolve_out(args, cfg) -> Path:
    root = args.out or cfg.get("output_dir") or os.environ.get("SDFLOW_OUT") or "sdflow_out"
    return Path(root).resolve()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdflow", description="Synthetic static/dynamic disentanglement pipeline.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", help="output directory (default: config output_dir, $SDFLOW_OUT, ./sdflow_out)")
    p.add_argument("--data", help="dataset directory (default: <out>/data)")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.sdf)")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--resume", action="store_true", help="train: continue from an existing checkpoint")
    p.add_argument("--threads", type=int, help="cap native thread pools (default: all cores)")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([f"--seed: must be >= 0, got {args.seed}"])
            cfg = apply_seed(cfg, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError([f"--threads: must be >= 1, got {args.threads}"])
        out = _resolve_out(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        cfg["output_dir"] = str(out)
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        run = Run(cfg, out, args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=args.threads):
            getattr(run, args.verb.replace("-", "_"))()
    except ConfigError as exc:
        for line in exc.errors:
            print(f"error[config] {line}", file=sys.stderr)
        return EXIT_INVALID
    except InputMissing as exc:
        print(f"error[input] {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        from .trainer import TrainingAborted
        kind = "aborted" if isinstance(exc, TrainingAborted) else "runtime"
        print(f"error[{kind}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
