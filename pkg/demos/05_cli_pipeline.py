"""
The command-line pipeline
=========================

The ``sdflow`` command chains data generation, training, evaluation,
sampling and swapping from one JSON config. Every run writes the fully
resolved config next to its artifacts.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

config = {
    "format_version": 1,
    "world": {"N": 500, "coupling_mode": "causal_scale"},
    "train": {"steps": 200, "eval_every": 100},
    "eval": {"n_swap": 50, "n_gen": 20},
}

with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "run.json"
    cfg.write_text(json.dumps(config))
    out = Path(tmp) / "out"
    for verb in ("gen-data", "train", "eval", "sample", "swap"):
        proc = subprocess.run([sys.executable, "-m", "sdflow", verb, "--config", str(cfg), "--out", str(out)],
                              capture_output=True, text=True)
        print(f"$ sdflow {verb}  -> exit {proc.returncode}")
        print(proc.stdout.strip() or proc.stderr.strip())

    print(sorted(p.name for p in out.iterdir()))
    print(json.dumps(json.loads((out / "metrics.json").read_text()), indent=1)[:600])

    # a bad value is reported with its field path and exit status 1
    cfg.write_text(json.dumps({"format_version": 1, "loss": {"alpha": -1}}))
    proc = subprocess.run([sys.executable, "-m", "sdflow", "train", "--config", str(cfg)],
                          capture_output=True, text=True)
    print("exit", proc.returncode, proc.stderr.strip())
