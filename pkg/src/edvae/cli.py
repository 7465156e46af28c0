"""Command-line experiment driver.

    edvae train|eval|ablate|export-entropy --config <path> [--seed N] [--out DIR]

The JSON config holds every :class:`TrainConfig` field at top level plus the
experiment keys below; unknown keys are rejected.

``dataset``            ``{"kind": "blobs"|"stripes"|"checker", ...SynthSpec}`` or
                       ``{"kind": "cifar10", "path": DIR}``
``eval_every``         evaluation cadence in iterations (0 = only at the end)
``eval_size``          held-out samples per evaluation
``checkpoint_every``   checkpoint cadence (0 = final checkpoint only)
``heatmap_iterations`` iterations to checkpoint for ``export-entropy``
``heatmap_sample``     held-out sample index used by ``export-entropy``
``ablation``           ``{"kind": "clamp"|"beta"|"tau", "grid": [...]}``
``out_dir``            default output directory

Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CifarFormatError, SynthSpec, generate_synth, load_cifar10_binary
from .metrics import entropy_heatmap
from .training import ConfigError, TrainConfig, TrainState, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

ABLATION_FIELDS = {"clamp": "clamp_max", "beta": "beta_max", "tau": "tau_value"}


@dataclass
class ExperimentConfig:
    train: TrainConfig
    dataset: dict = field(default_factory=lambda: {"kind": "blobs"})
    eval_every: int = 0
    eval_size: int = 256
    checkpoint_every: int = 0
    heatmap_iterations: list = field(default_factory=list)
    heatmap_sample: int = 0
    ablation: dict | None = None
    out_dir: str = "runs/out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        exp_keys = {f.name for f in dataclasses.fields(cls)} - {"train"}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(d) - exp_keys - train_keys)
        if unknown:
            raise ConfigError("unknown keys: " + ", ".join(unknown), unknown)
        cfg = TrainConfig.from_dict({k: v for k, v in d.items() if k in train_keys})
        exp = cls(cfg, **{k: v for k, v in d.items() if k in exp_keys})
        exp.validate()
        return exp

    def validate(self) -> None:
        bad = []
        if not isinstance(self.dataset, dict) or "kind" not in self.dataset:
            bad.append("dataset")
        for name in ("eval_every", "checkpoint_every", "heatmap_sample"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                bad.append(name)
        if not isinstance(self.eval_size, int) or self.eval_size < 1:
            bad.append("eval_size")
        if not all(isinstance(t, int) and 0 <= t <= self.train.iterations for t in self.heatmap_iterations):
            bad.append("heatmap_iterations")
        if self.ablation is not None:
            a = self.ablation
            if (not isinstance(a, dict) or a.get("kind") not in ABLATION_FIELDS or not a.get("grid")
                    or set(a) - {"kind", "grid"}):
                bad.append("ablation")
        if bad:
            raise ConfigError("invalid config values: " + ", ".join(bad), bad)

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        for f in dataclasses.fields(self):
            if f.name != "train":
                out[f.name] = getattr(self, f.name)
        return out

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return ExperimentConfig.from_dict(raw)


def build_datasets(exp: ExperimentConfig):
    spec = dict(exp.dataset)
    kind = spec.pop("kind")
    if kind == "cifar10":
        if set(spec) - {"path"} or "path" not in spec:
            raise ConfigError("cifar10 dataset takes exactly one key: path", ["dataset"])
        return load_cifar10_binary(spec["path"], "train"), load_cifar10_binary(spec["path"], "test")
    try:
        synth = SynthSpec(kind=kind, **spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid dataset spec: {exc}", ["dataset"]) from exc
    if synth.extent != exp.train.image_extent:
        raise ConfigError("dataset extent differs from image_extent", ["dataset", "image_extent"])
    return generate_synth(synth), generate_synth(synth, "test", exp.eval_size)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ckpt_dir(out: Path, t) -> Path:
    return out / "checkpoints" / (t if isinstance(t, str) else f"iter_{t:06d}")


def run_training(exp: ExperimentConfig, out: Path) -> dict:
    """Train once into ``out``; returns the summary dictionary."""
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", exp.to_dict())
    train_ds, eval_ds = build_datasets(exp)
    cfg = exp.train
    wanted = set(exp.heatmap_iterations)

    def on_step(state: TrainState, t: int):
        done = t + 1
        if done in wanted or (exp.checkpoint_every and done % exp.checkpoint_every == 0):
            save_checkpoint(_ckpt_dir(out, done), state)

    if 0 in wanted:
        save_checkpoint(_ckpt_dir(out, 0), TrainState.create(cfg))
    result = train(cfg, train_ds, eval_ds, eval_every=exp.eval_every, eval_size=exp.eval_size,
                   metrics_path=out / "metrics.csv", eval_path=out / "eval.csv", on_step=on_step)
    summary = {"model": cfg.model, "iterations_run": len(result.records), "diverged": result.diverged,
               "divergence": result.divergence}
    if result.final_eval is not None:
        ev = result.final_eval
        summary.update(final_perplexity=ev["perplexity"], final_mse_x1e3=ev["mse_x1e3"],
                       mean_entropy=ev["mean_entropy"], std_entropy=ev["std_entropy"],
                       mean_uncertainty=None if math.isnan(ev["mean_uncertainty"]) else ev["mean_uncertainty"])
        on_train = evaluate(result.state, train_ds, cfg.batch_size, exp.eval_size, seed_key="eval-train")
        summary.update(train_perplexity=on_train["perplexity"], train_mse_x1e3=on_train["mse_x1e3"])
        save_checkpoint(_ckpt_dir(out, "final"), result.state)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(exp: ExperimentConfig, out: Path) -> int:
    summary = run_training(exp, out)
    if summary["diverged"]:
        print(f"training diverged: {summary['divergence']}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({k: summary[k] for k in ("final_perplexity", "final_mse_x1e3", "mean_entropy")}))
    return EXIT_OK


def cmd_eval(exp: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> int:
    ckpt = checkpoint or _ckpt_dir(out, "final")
    state = load_checkpoint(ckpt, exp.train)
    _, eval_ds = build_datasets(exp)
    ev = evaluate(state, eval_ds, exp.train.batch_size, exp.eval_size)
    summary = {
        "checkpoint": str(ckpt),
        "perplexity": ev["perplexity"],
        "mse_x1e3": ev["mse_x1e3"],
        "mean_entropy": ev["mean_entropy"],
        "std_entropy": ev["std_entropy"],
        "usage_histogram": ev["usage_counts"],
        "positions": ev["positions"],
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("perplexity", "mse_x1e3")}))
    return EXIT_OK


def cmd_ablate(exp: ExperimentConfig, out: Path) -> int:
    if exp.ablation is None:
        raise ConfigError("ablate needs an 'ablation' entry", ["ablation"])
    kind, grid = exp.ablation["kind"], exp.ablation["grid"]
    field_name = ABLATION_FIELDS[kind]
    rows = []
    for value in grid:
        changes = {field_name: value}
        if kind == "tau":
            changes["tau_schedule"] = "constant"
        run = exp.with_train(**changes)
        summary = run_training(run, out / f"{kind}_{value}")
        rows.append([value, summary.get("final_perplexity", ""), summary.get("final_mse_x1e3", ""),
                     int(summary["diverged"])])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"ablation_{kind}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "perplexity", "mse_x1e3", "diverged"])
        w.writerows(rows)
    return EXIT_OK


def position_probs(state: TrainState, pixels: np.ndarray) -> np.ndarray:
    """Per-position categorical probabilities ``N x N x K`` for one image."""
    with T.no_tape():
        z_e = state.model.encode(T.Tensor(pixels[None]))
        res = state.model.quantize(z_e, 1.0, "infer", state.rng.child("heatmap"))
    if res.probs is None:
        raise ConfigError("entropy heatmaps need a categorical model (edvae, dvae or gs_vq)", ["model"])
    return res.probs[0]


def cmd_export_entropy(exp: ExperimentConfig, out: Path) -> int:
    if not exp.heatmap_iterations:
        raise ConfigError("export-entropy needs 'heatmap_iterations'", ["heatmap_iterations"])
    _, eval_ds = build_datasets(exp)
    pixels = eval_ds.batch([exp.heatmap_sample]).pixels.data[0]
    dest = out / "entropy"
    dest.mkdir(parents=True, exist_ok=True)
    lo, hi, files = math.inf, -math.inf, []
    for t in exp.heatmap_iterations:
        grid = entropy_heatmap(position_probs(load_checkpoint(_ckpt_dir(out, t), exp.train), pixels))
        name = f"entropy_iter_{t:06d}.csv"
        np.savetxt(dest / name, grid, delimiter=",", fmt="%.17g")
        lo, hi = min(lo, float(grid.min())), max(hi, float(grid.max()))
        files.append(name)
    _write_json(dest / "heatmaps.json", {"files": files, "sample": exp.heatmap_sample, "vmin": lo, "vmax": hi,
                                         "upper_bound": math.log(exp.train.codebook_size)})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "export-entropy": cmd_export_entropy}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edvae", description="Train and evaluate discrete VAEs.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    p.add_argument("--checkpoint", type=Path, help="checkpoint directory for eval")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = load_config(args.config, args.seed)
        out = args.out or Path(exp.out_dir)
        if args.command == "eval":
            return cmd_eval(exp, out, args.checkpoint)
        return COMMANDS[args.command](exp, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, CifarFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
