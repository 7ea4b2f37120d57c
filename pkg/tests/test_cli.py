import json
import subprocess
import sys

import numpy as np
import pytest

from sdflow import cli
from sdflow.evalkit import MetricsReport, read_report
from sdflow.trainer import load_checkpoint

SMALL = {
    "format_version": 1,
    "world": {"N": 60, "T": 3, "seed": 5},
    "model": {"enc_hidden": [6], "flow_layers": 2, "cond_hidden": [5], "rnn_width": 4, "ctx_dim": 3,
              "prior_layers": 2, "prior_hidden": [4]},
    "train": {"steps": 6, "batch_size": 10, "eval_every": 3, "eval_size": 20},
    "eval": {"n_swap": 10, "m_g": 2, "n_gen": 10, "sample_count": 7, "swap_pairs": 12},
}


def write_cfg(tmp_path, doc, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(p)


def run(tmp_path, verb, doc=SMALL, *extra):
    return cli.main([verb, "--config", write_cfg(tmp_path, doc), "--out", str(tmp_path / "out"), "--quiet",
                     *extra])


def test_minimal_config_resolved_and_idempotent(tmp_path):
    assert run(tmp_path, "gen-data", {"format_version": 1, "world": {"N": 5, "T": 2}}) == 0
    resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
    assert resolved["loss"]["alpha"] == 1.0 and resolved["world"]["N"] == 5
    assert set(resolved) == {"format_version", "output_dir", "world", "model", "loss", "train", "eval"}
    assert cli.parse_config(tmp_path / "out" / "resolved_config.json") == resolved


def test_all_validation_errors_reported(tmp_path, capsys):
    doc = {"format_version": 1, "loss": {"alpha": -1, "betta": 0.1}, "train": {"steps": 2.5},
           "world": {"coupling_mode": "loopy"}}
    assert run(tmp_path, "gen-data", doc) == cli.EXIT_INVALID
    err = capsys.readouterr().err
    for path in ("loss.alpha", "loss.betta", "train.steps", "world.coupling_mode"):
        assert f"error[config] {path}:" in err
    with pytest.raises(cli.ConfigError) as exc:
        cli.validate_config(doc)
    assert len(exc.value.errors) == 4


def test_unknown_top_level_key_and_version(tmp_path):
    with pytest.raises(cli.ConfigError, match="surprise"):
        cli.validate_config({"format_version": 1, "surprise": {}})
    with pytest.raises(cli.ConfigError, match="format_version"):
        cli.validate_config({"world": {}})


def test_batch_size_checked_against_dataset(tmp_path, capsys):
    doc = {"format_version": 1, "world": {"N": 10, "T": 2}, "train": {"batch_size": 64}}
    assert run(tmp_path, "gen-data", doc) == 0
    assert run(tmp_path, "train", doc) == cli.EXIT_INVALID
    assert "train.batch_size" in capsys.readouterr().err


def test_syntax_error_has_line_and_column(tmp_path, capsys):
    assert run(tmp_path, "gen-data", '{\n  "format_version": 1,\n  "world": {"N": }\n}') == cli.EXIT_INVALID
    assert "line 3, column 18" in capsys.readouterr().err


def test_missing_inputs_exit_one(tmp_path, capsys):
    assert run(tmp_path, "eval") == cli.EXIT_INVALID
    assert "not found" in capsys.readouterr().err
    assert cli.main(["eval", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_INVALID


def test_missing_checkpoint_message_names_path(tmp_path, capsys):
    run(tmp_path, "gen-data")
    capsys.readouterr()
    assert run(tmp_path, "eval") == cli.EXIT_INVALID
    err = capsys.readouterr().err
    assert "checkpoint not found" in err and str(tmp_path / "out" / "checkpoint.sdf") in err


def test_full_pipeline(tmp_path):
    for verb in ("gen-data", "train", "eval", "sample", "swap"):
        assert run(tmp_path, verb) == 0, verb
    out = tmp_path / "out"
    rep = read_report(out / "metrics.json")
    assert all(v is not None for v in rep.to_dict().values())
    assert set(json.loads((out / "metrics.json").read_text())) == set(MetricsReport().to_dict())
    man = json.loads((out / "samples_manifest.json").read_text())
    x = np.frombuffer((out / "samples.f64").read_bytes(), dtype="<f8").reshape(man["shape"])
    assert x.shape == (7, 3, 4) and np.isfinite(x).all()
    swap = json.loads((out / "swap_report.json").read_text())
    assert swap["pairs"] == 12 and len(swap["static_ci"]) == 2
    assert load_checkpoint(out / "checkpoint.sdf").step == 6
    lines = (out / "train_log.csv").read_text().splitlines()
    assert lines[0].startswith("step,total,nll,kl") and len(lines) == 3


def test_resume_and_seed_override(tmp_path):
    run(tmp_path, "gen-data")
    short = dict(SMALL, train=dict(SMALL["train"], steps=3))
    assert run(tmp_path, "train", short) == 0
    assert run(tmp_path, "train", SMALL, "--resume") == 0
    resumed = load_checkpoint(tmp_path / "out" / "checkpoint.sdf")
    assert cli.main(["train", "--config", write_cfg(tmp_path, SMALL), "--out", str(tmp_path / "out"),
                     "--checkpoint", str(tmp_path / "direct.sdf"), "--quiet"]) == 0
    direct = load_checkpoint(tmp_path / "direct.sdf")
    assert all(direct.params[k].tobytes() == resumed.params[k].tobytes() for k in direct.params)

    assert run(tmp_path, "gen-data", SMALL, "--seed", "9") == 0
    resolved = json.loads((tmp_path / "out" / "resolved_config.json").read_text())
    assert resolved["world"]["seed"] == resolved["train"]["seed"] == resolved["eval"]["seed"] == 9


def test_progress_lines_are_csv(tmp_path, capsys):
    run(tmp_path, "gen-data")
    capsys.readouterr()
    assert cli.main(["train", "--config", write_cfg(tmp_path, SMALL), "--out", str(tmp_path / "out")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "step,total,nll,kl,invariance_gap,mcc_static,leakage,wall_ms"
    assert [l.split(",")[0] for l in lines[1:]] == ["3", "6"]


def test_quiet_suppresses_progress(tmp_path, capsys):
    run(tmp_path, "gen-data")
    run(tmp_path, "train")
    captured = capsys.readouterr()
    assert captured.out == "" and captured.err == ""


def test_env_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SDFLOW_OUT", str(tmp_path / "envout"))
    assert cli.main(["gen-data", "--config", write_cfg(tmp_path, SMALL), "--quiet"]) == 0
    assert (tmp_path / "envout" / "data" / "manifest.json").exists()


def test_ablate_layout(tmp_path):
    run(tmp_path, "gen-data")
    assert run(tmp_path, "ablate") == 0
    for name in ("full", "no_shuffle", "unconditional"):
        d = tmp_path / "out" / name
        assert (d / "train_log.csv").exists() and (d / "metrics.json").exists() and (d / "checkpoint.sdf").exists()
        assert load_checkpoint(d / "checkpoint.sdf").extra["variant"] == name


def test_runtime_failure_exit_two(tmp_path, capsys):
    run(tmp_path, "gen-data")
    (tmp_path / "out" / "checkpoint.sdf").write_bytes(b"SDFLOW01garbage" * 10)
    assert run(tmp_path, "eval") == cli.EXIT_RUNTIME
    assert "checksum" in capsys.readouterr().err


def test_inputs_not_mutated(tmp_path):
    run(tmp_path, "gen-data")
    data = tmp_path / "out" / "data"
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    run(tmp_path, "train")
    run(tmp_path, "eval")
    assert before == {p.name: p.read_bytes() for p in data.iterdir()}


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, {"format_version": 1, "loss": {"alpha": -1}})
    proc = subprocess.run([sys.executable, "-m", "sdflow", "gen-data", "--config", cfg, "--threads", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "loss.alpha" in proc.stderr
