"""Flat run configuration.

A config file holds one ``dotted.key = value`` pair per line; ``#`` starts a
comment.  Values are parsed according to the type of the built-in default, so
unknown keys and ill-typed values are rejected up front.  Lists are written
comma separated and ``none`` clears an optional value.

Resolution order: preset defaults, then the file, then command-line overrides.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import ConfigError

OUT_ROOT_ENV = "GRAPHAU_PAIN_OUT"
SNAPSHOT_NAME = "config.resolved.txt"

# key -> (default, type); type is one of int, float, str, bool, "floats", "ints", "opt_str"
_SCHEMA = {
    "seed": (0, int),
    "synth.count": (2000, int),
    "synth.side": (96, int),
    "synth.noise": (0.05, float),
    "synth.mixture": ((0.82, 0.15, 0.03), "floats"),
    "synth.modeled_aus": ((1, 2, 4, 6, 9, 12, 25, 26), "ints"),
    "synth.n_subjects": (25, int),
    "synth.cooccur": (0.3, float),
    "synth.distractor_rate": (0.3, float),
    "synth.frame_prefix": ("f", str),
    "synth.subject_prefix": ("s", str),
    # per-AU blob rectangles "code:r0.c0.r1.c1,..."; none keeps the built-in layout
    "synth.regions": (None, "opt_str"),
    # "png" writes image files and references them; "uri" keeps re-renderable references
    "synth.image_refs": ("png", str),
    "model.backbone": ("desk", str),
    "model.image_side": (96, int),
    "model.d_au": (64, int),
    "model.channels": (64, int),
    "model.k": (3, int),
    "model.ablation": ("full", str),
    "sft.lr": (1e-3, float),
    "sft.batch_size": (16, int),
    "sft.epochs": (10, int),
    "sft.weight_decay": (5e-4, float),
    "train.lr": (3e-4, float),
    "train.batch_size": (32, int),
    "train.epochs": (40, int),
    "train.weight_decay": (5e-4, float),
    # "auto" derives inverse-frequency weights from the training manifest
    "train.class_weights": ("auto", str),
    "train.val_fraction": (0.1, float),
    "train.scheme": ("3cat", str),
    "eval.scheme": ("3cat", str),
    "eval.png": (True, bool),
    "ablate.modes": ("full,no_graph_rep,no_gnn,backbone_only", str),
}

# Values the full-scale preset replaces; everything else is shared.
_PAPER_PRESET = {
    "model.backbone": "paper",
    "model.image_side": 172,
    "model.d_au": 512,
    "model.channels": 2048,
    "synth.side": 172,
    "sft.lr": 1e-5,
    "sft.batch_size": 16,
    "sft.epochs": 17,
    "train.lr": 1e-4,
    "train.batch_size": 64,
    "train.epochs": 8,
}
PRESETS = {"desk": {}, "paper": _PAPER_PRESET}


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "opt_str":
            return None if raw.lower() in ("", "none") else raw
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def defaults(preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    out = {k: v for k, (v, _) in _SCHEMA.items()}
    out.update(PRESETS[preset])
    return out


def parse_pairs(lines: Iterable[str], source: str = "<overrides>") -> dict:
    """Parse ``key = value`` lines into typed values (unknown keys rejected)."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw, _SCHEMA[key][1])
    return out


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_pairs(text.splitlines(), str(path))


def resolve(path: Optional[str] = None, overrides: Iterable[str] = (), preset: str = "desk",
            extra: Optional[Mapping] = None) -> dict:
    """Preset defaults <- file <- ``extra`` (typed values from flags) <- ``overrides``."""
    cfg = defaults(preset)
    if path:
        cfg.update(load_file(path))
    for key, value in (extra or {}).items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    cfg.update(parse_pairs(overrides))
    return cfg


def dumps(cfg: Mapping) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


def write_snapshot(cfg: Mapping, out_dir) -> Path:
    path = Path(out_dir) / SNAPSHOT_NAME
    path.write_text(dumps(cfg), encoding="utf-8")
    return path


def default_out_root() -> str:
    return os.environ.get(OUT_ROOT_ENV, "runs")


def keys() -> list[str]:
    return sorted(_SCHEMA)
