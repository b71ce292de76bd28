"""Checkpoint directories: manifest.json plus one tensor blob per array."""

from __future__ import annotations

import json
import re
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import read_tensor, tensor_to_bytes

SCHEMA = "hmrnet.checkpoint/1"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_checkpoint(path, model, optimizer=None, state: dict | None = None, train_config=None) -> Path:
    """Write ``model`` (+ optimizer momentum, trainer ``state``) to directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"param.{n}", p.data) for n, p in model.named_parameters()]
    arrays += [(f"buffer.{n}", b) for n, b in model.named_buffers()]
    arrays.append(("tracker.ema", np.asarray(model.tracker.ema)))
    if optimizer is not None:
        arrays += [(f"momentum.{n}", b) for n, b in sorted(optimizer.buffers.items())]
    entries = []
    for name, array in arrays:
        fname = _safe(name) + ".bin"
        (out / fname).write_bytes(tensor_to_bytes(array, name))
        entries.append({"name": name, "file": fname, "shape": list(np.shape(array))})
    manifest = {
        "schema": SCHEMA,
        "model_config": asdict(model.config),
        "train_config": asdict(train_config) if train_config is not None else None,
        "embeddings_ready": model.embeddings_ready,
        "local_ready": model.local_ready,
        "bn_initialized": {n: s.initialized for n, s in model.batch_norm_states()},
        "tracker_steps": model.tracker.steps,
        "state": state or {},
        "tensors": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    if manifest.get("schema") != SCHEMA:
        raise ValidationError(f"{path} is not a {SCHEMA} checkpoint")
    return manifest


def load_checkpoint(path, optimizer=None):
    """Rebuild the model saved at ``path``; fills ``optimizer`` buffers if given.

    Returns (model, manifest).
    """
    from .model import HMRNet, ModelConfig

    path = Path(path)
    manifest = read_manifest(path)
    cfg = dict(manifest["model_config"])
    model = HMRNet(ModelConfig(**cfg))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for entry in manifest["tensors"]:
        array, name = read_tensor(path / entry["file"])
        kind, _, key = name.partition(".")
        if kind == "param":
            params[key].data[...] = array
        elif kind == "buffer":
            buffers[key][...] = array
        elif kind == "tracker" and key == "ema":
            model.tracker.ema = array.copy()
        elif kind == "momentum" and optimizer is not None:
            optimizer.buffers[key] = array.copy()
    for name, state in model.batch_norm_states():
        state.initialized = manifest["bn_initialized"].get(name, False)
    model.tracker.steps = manifest["tracker_steps"]
    model.embeddings_ready = manifest["embeddings_ready"]
    model.local_ready = manifest["local_ready"]
    return model, manifest
