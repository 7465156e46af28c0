import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from edvae.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from edvae.training import METRIC_FIELDS

BASE = {
    "model": "edvae",
    "beta_max": 5e-7,
    "iterations": 4,
    "batch_size": 2,
    "base_channels": 4,
    "codebook_size": 16,
    "embedding_dim": 4,
    "res_blocks_per_stage": 1,
    "image_extent": 16,
    "dataset": {"kind": "blobs", "extent": 16, "size": 16},
    "eval_size": 8,
}


def write_config(tmp_path, name="cfg.json", **changes):
    cfg = {**BASE, **changes}
    for k in [k for k, v in cfg.items() if v is None]:
        del cfg[k]
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_train_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path, checkpoint_every=2)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_FIELDS) and len(lines) == 5
    summary = json.loads((out / "summary.json").read_text())
    assert {"final_perplexity", "final_mse_x1e3", "mean_entropy", "train_perplexity"} <= set(summary)
    assert 1 <= summary["train_perplexity"] <= 16
    assert (out / "checkpoints" / "iter_000002" / "manifest.json").exists()
    assert (out / "checkpoints" / "final" / "manifest.json").exists()
    assert json.loads((out / "resolved_config.json").read_text())["beta_max"] == 5e-7


def test_train_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    run("train", "--config", cfg, "--out", tmp_path / "a")
    run("train", "--config", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_changes_run(tmp_path):
    cfg = write_config(tmp_path)
    run("train", "--config", cfg, "--out", tmp_path / "a")
    run("train", "--config", cfg, "--seed", 5, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "resolved_config.json").read_text())["seed"] == 5


def test_missing_beta_max(tmp_path, capsys):
    cfg = write_config(tmp_path, beta_max=None)
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    assert "beta_max" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path, learning_rate=0.1)
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    assert run("train", "--config", tmp_path / "bad.json") == EXIT_CONFIG


def test_missing_config_file_is_io_error(tmp_path):
    assert run("train", "--config", tmp_path / "none.json") == EXIT_IO


def test_divergence_exit_code(tmp_path, capsys, monkeypatch):
    from edvae import training
    from edvae.quantizers import DivergenceError

    def fail(state, batch, t):
        raise DivergenceError("alpha", t, "injected")

    monkeypatch.setattr(training, "train_step", fail)
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_DIVERGED
    assert "alpha" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["diverged"] is True


def test_eval_fresh_and_repeatable(tmp_path):
    cfg = write_config(tmp_path, iterations=1)
    out = tmp_path / "run"
    run("train", "--config", cfg, "--out", out)
    assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
    first = (out / "eval_summary.json").read_bytes()
    assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
    assert (out / "eval_summary.json").read_bytes() == first
    summary = json.loads(first)
    assert 1 <= summary["perplexity"] <= 16
    assert sum(summary["usage_histogram"]) == summary["positions"] == 8 * 4 * 4


def test_eval_checkpoint_mismatch(tmp_path, capsys):
    out = tmp_path / "run"
    run("train", "--config", write_config(tmp_path, iterations=1), "--out", out)
    other = write_config(tmp_path, "other.json", codebook_size=32, base_channels=8)
    assert run("eval", "--config", other, "--out", out) == EXIT_CONFIG
    assert "codebook_size" in capsys.readouterr().err


def test_eval_without_checkpoint(tmp_path):
    assert run("eval", "--config", write_config(tmp_path), "--out", tmp_path / "empty") == EXIT_IO


def test_ablate_clamp_grid(tmp_path):
    grid = [10, 15, 20, 25, 30]
    cfg = write_config(tmp_path, iterations=2, ablation={"kind": "clamp", "grid": grid})
    assert run("ablate", "--config", cfg, "--out", tmp_path / "abl") == EXIT_OK
    with open(tmp_path / "abl" / "ablation_clamp.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in rows] == grid
    assert all(r["diverged"] in ("0", "1") for r in rows)
    resolved = json.loads((tmp_path / "abl" / "clamp_25" / "resolved_config.json").read_text())
    assert resolved["clamp_max"] == 25


def test_ablate_beta_range_endpoints(tmp_path):
    cfg = write_config(tmp_path, iterations=1, ablation={"kind": "beta", "grid": [1e-7, 1e-4]})
    assert run("ablate", "--config", cfg, "--out", tmp_path / "abl") == EXIT_OK
    assert len((tmp_path / "abl" / "ablation_beta.csv").read_text().splitlines()) == 3


def test_ablate_tau_uses_constant_temperature(tmp_path):
    cfg = write_config(tmp_path, iterations=1, ablation={"kind": "tau", "grid": [0.5]})
    run("ablate", "--config", cfg, "--out", tmp_path / "abl")
    with open(tmp_path / "abl" / "tau_0.5" / "metrics.csv") as fh:
        assert float(next(csv.DictReader(fh))["tau"]) == 0.5


def test_ablate_needs_grid(tmp_path):
    cfg = write_config(tmp_path, ablation={"kind": "clamp", "grid": []})
    assert run("ablate", "--config", cfg, "--out", tmp_path / "abl") == EXIT_CONFIG


def test_export_entropy(tmp_path):
    base = dict(base_channels=8, codebook_size=32, embedding_dim=4, image_extent=32,
                dataset={"kind": "blobs", "extent": 32, "size": 8})
    cfg = write_config(tmp_path, iterations=2, heatmap_iterations=[0, 2], **base)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out) == EXIT_OK
    assert run("export-entropy", "--config", cfg, "--out", out) == EXIT_OK
    meta = json.loads((out / "entropy" / "heatmaps.json").read_text())
    grids = [np.loadtxt(out / "entropy" / f, delimiter=",") for f in meta["files"]]
    assert len(grids) == 2
    for g in grids:
        assert g.shape == (8, 8)
        assert g.min() >= 0 and g.max() <= math.log(32) + 1e-12
        assert meta["vmin"] <= g.min() and g.max() <= meta["vmax"]
    assert meta["upper_bound"] == math.log(32)


def test_export_entropy_missing_checkpoint(tmp_path):
    cfg = write_config(tmp_path, heatmap_iterations=[3])
    assert run("export-entropy", "--config", cfg, "--out", tmp_path / "none") == EXIT_IO


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "edvae", "train", "--config", str(write_config(tmp_path)),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "final_perplexity" in proc.stdout
