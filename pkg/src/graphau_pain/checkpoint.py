"""Checkpoint archives.

A checkpoint is an ``.npz`` archive: one float32 array per canonical parameter
name (``stage.component.kind``, e.g. ``gnn.fc1.weight``) plus a ``__meta__``
JSON string holding the model config, format version and training history.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, IncompatibleCheckpoint
from .model import GraphAUPain, ModelConfig

FORMAT_VERSION = 1
META_KEY = "__meta__"


def canonical_state(model: GraphAUPain) -> dict:
    """Parameter and buffer arrays keyed by canonical name (BN batch counters dropped)."""
    return {
        name: t.detach().cpu().numpy().astype(np.float32)
        for name, t in model.state_dict().items()
        if not name.endswith("num_batches_tracked")
    }


def save_checkpoint(path, model: GraphAUPain, **meta) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = canonical_state(model)
    full_meta = {"format_version": FORMAT_VERSION, "model_config": model.config.to_dict()}
    full_meta.update(meta)
    arrays[META_KEY] = np.array(json.dumps(full_meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(arrays, meta)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {exc}") from None
    if META_KEY not in arrays:
        raise IncompatibleCheckpoint(f"{path} has no metadata record")
    meta = json.loads(str(arrays.pop(META_KEY)))
    if meta.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return arrays, meta


def apply_state(model: GraphAUPain, arrays: dict, prefixes=None) -> None:
    """Copy arrays into ``model`` after verifying every expected name and shape.

    With ``prefixes`` only names under those prefixes are required and copied.
    """
    expected = {k: v for k, v in model.state_dict().items() if not k.endswith("num_batches_tracked")}
    if prefixes is not None:
        expected = {k: v for k, v in expected.items() if k.startswith(tuple(prefixes))}
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise IncompatibleCheckpoint(f"checkpoint lacks parameters {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, target in expected.items():
        src = arrays[name]
        if tuple(src.shape) != tuple(target.shape):
            raise IncompatibleCheckpoint(
                f"{name}: checkpoint shape {tuple(src.shape)} != model shape {tuple(target.shape)}"
            )
    with torch.no_grad():
        for name, target in expected.items():
            target.copy_(torch.from_numpy(np.asarray(arrays[name])).to(target.dtype))


def load_model(path, seed: int = 0) -> tuple[GraphAUPain, dict]:
    arrays, meta = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError) as exc:
        raise IncompatibleCheckpoint(f"bad model config in checkpoint: {exc}") from None
    model = GraphAUPain(config, seed=seed)
    unexpected = sorted(set(arrays) - set(canonical_state(model)))
    if unexpected:
        raise IncompatibleCheckpoint(f"checkpoint has unknown parameters {unexpected[:5]}")
    apply_state(model, arrays)
    return model, meta
