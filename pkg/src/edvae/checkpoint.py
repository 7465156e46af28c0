"""Checkpoint directories: ``manifest.json`` plus one EDVT blob per tensor."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .tensor import tensor_from_bytes, tensor_to_bytes
from .training import ConfigError, Model, OptimizerState, TrainConfig, TrainState
from .rng import Rng

__all__ = ["CheckpointError", "config_hash", "save_checkpoint", "load_checkpoint", "MANIFEST"]

MANIFEST = "manifest.json"
FORMAT = "edvae-checkpoint/1"


class CheckpointError(IOError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(_canonical(cfg.to_dict())).hexdigest()


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".edvt"


def save_checkpoint(path, state: TrainState) -> Path:
    """Write ``state``'s model tensors and config under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in state.model.state_tensors().items():
        blob = tensor_to_bytes(arr)
        fname = _blob_name(name)
        (path / fname).write_bytes(blob)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format": FORMAT,
        "config": state.cfg.to_dict(),
        "config_hash": config_hash(state.cfg),
        "iteration": state.iteration,
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: malformed manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState` from ``path``.

    With ``cfg`` given, its shape-determining fields must agree with the
    stored config, otherwise :class:`ConfigError` is raised.
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored = TrainConfig.from_dict(manifest["config"])
    if config_hash(stored) != manifest.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch")
    if cfg is not None:
        diff = sorted(k for k, v in cfg.model_fields().items() if stored.model_fields()[k] != v)
        if diff:
            raise ConfigError("checkpoint does not match config in: " + ", ".join(diff), diff)
    else:
        cfg = stored
    arrays = {}
    for entry in manifest["tensors"]:
        blob_path = path / entry["file"]
        try:
            blob = blob_path.read_bytes()
        except FileNotFoundError as exc:
            raise CheckpointError(f"missing tensor blob {blob_path}") from exc
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{blob_path}: content hash mismatch (truncated or modified)")
        try:
            arrays[entry["name"]] = tensor_from_bytes(blob).data
        except ValueError as exc:
            raise CheckpointError(f"{blob_path}: {exc}") from exc
    root = Rng(cfg.seed)
    model = Model(cfg, root.child("model"))
    model.load_state_tensors(arrays)
    state = TrainState(cfg, model, OptimizerState.for_params(model.parameters()), root)
    state.iteration = int(manifest.get("iteration", 0))
    return state
