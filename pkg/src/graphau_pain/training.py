"""Losses and the two-stage training protocol (AU-occurrence SFT, then pain)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import apply_state, canonical_state, read_checkpoint, save_checkpoint
from .data.images import load_images
from .data.manifest import DatasetManifest
from .data.prep import compute_class_weights, split_subject_disjoint
from .errors import (
    ConfigError,
    EmptyDataset,
    IncompatibleCheckpoint,
    NonOneHotLabel,
    NumericFailure,
    ShapeMismatch,
)
from .evaluation import au_report, confusion, metrics_from_confusion
from .facs import SCHEMES
from .model import REPRESENTATION_PREFIXES, GraphAUPain, ModelConfig

log = logging.getLogger(__name__)

EPS = 1e-8
HEAD_PREFIXES = ("proj.", "classifier.", "baseline.")


@dataclass
class TrainConfig:
    stage: str = "pain"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    seed: int = 0
    # None: derive from the training manifest; "uniform"; or explicit per-class values
    class_weights: Union[None, str, Sequence[float]] = None
    eps: float = EPS
    scheme: str = "3cat"
    val_fraction: float = 0.1

    @classmethod
    def au_sft(cls, **kw) -> "TrainConfig":
        base = dict(stage="au_sft", lr=1e-5, batch_size=16, epochs=17)
        base.update(kw)
        return cls(**base)

    @classmethod
    def pain(cls, **kw) -> "TrainConfig":
        base = dict(stage="pain", lr=1e-4, batch_size=64, epochs=8)
        base.update(kw)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.stage not in ("au_sft", "pain"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr must be >= 0, batch_size >= 1, epochs >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_weights"] is not None and not isinstance(d["class_weights"], str):
            d["class_weights"] = [float(w) for w in d["class_weights"]]
        return d


@dataclass
class Checkpoint:
    params: dict
    model_config: ModelConfig
    history: list = field(default_factory=list)
    epoch: int = 0
    metrics: list = field(default_factory=list)
    modeled_aus: Optional[list] = None

    def save(self, path) -> None:
        model = self.to_model()
        save_checkpoint(path, model, history=self.history, epoch=self.epoch,
                        metrics=self.metrics, modeled_aus=self.modeled_aus)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = read_checkpoint(path)
        try:
            config = ModelConfig.from_dict(meta["model_config"])
        except (KeyError, TypeError) as exc:
            raise IncompatibleCheckpoint(f"bad model config in checkpoint: {exc}") from None
        ckpt = cls(arrays, config, meta.get("history", []), meta.get("epoch", 0),
                   meta.get("metrics", []), meta.get("modeled_aus"))
        ckpt.to_model()  # verifies names and shapes
        return ckpt

    def to_model(self) -> GraphAUPain:
        model = GraphAUPain(self.model_config)
        apply_state(model, self.params)
        return model


# ---------------------------------------------------------------- losses

def one_hot(labels, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(labels, dtype=torch.long), n_classes).to(dtype)


def weighted_ce_loss(logits: torch.Tensor, labels: torch.Tensor, weights, eps: float = EPS) -> torch.Tensor:
    """-(1/N) sum_i sum_j w_j y_ij log max(softmax(logits)_ij, eps)."""
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    if logits.dim() != 2 or labels.shape != logits.shape or weights.shape != (logits.shape[1],):
        raise ShapeMismatch(
            f"logits {tuple(logits.shape)}, labels {tuple(labels.shape)}, weights {tuple(weights.shape)}"
        )
    labels = labels.to(logits.dtype)
    if not (((labels == 0) | (labels == 1)).all() and (labels.sum(1) == 1).all()):
        raise NonOneHotLabel("every label row must be one-hot")
    p = torch.softmax(logits, dim=1)
    return -(weights * labels * torch.clamp_min(p, eps).log()).sum(1).mean()


def au_bce_loss(p: torch.Tensor, bits: torch.Tensor, pos_weight=None, eps: float = EPS) -> torch.Tensor:
    """Mean over samples and AUs of positively-weighted binary cross-entropy."""
    if p.shape != bits.shape:
        raise ShapeMismatch(f"probabilities {tuple(p.shape)} vs labels {tuple(bits.shape)}")
    bits = bits.to(p.dtype)
    if pos_weight is None:
        pos_weight = torch.ones(p.shape[-1], dtype=p.dtype)
    pos_weight = torch.as_tensor(pos_weight, dtype=p.dtype)
    if pos_weight.shape != (p.shape[-1],):
        raise ShapeMismatch(f"pos_weight {tuple(pos_weight.shape)} for {p.shape[-1]} AUs")
    pos = pos_weight * bits * torch.clamp_min(p, eps).log()
    neg = (1 - bits) * torch.clamp_min(1 - p, eps).log()
    return -(pos + neg).mean()


def au_positive_weights(manifest: DatasetManifest) -> np.ndarray:
    """(1 - rate) / rate per modeled AU; AUs that are never or always active get 1."""
    occ = np.array([r.occurrence_vector(manifest.modeled_aus) for r in manifest.records], dtype=np.float64)
    rate = occ.mean(axis=0) if len(occ) else np.zeros(len(manifest.modeled_aus))
    out = np.ones_like(rate)
    ok = (rate > 0) & (rate < 1)
    out[ok] = (1 - rate[ok]) / rate[ok]
    return out


# ---------------------------------------------------------------- helpers

def active_parameter_names(model: GraphAUPain, stage: str) -> list[str]:
    """Parameters that actually receive gradient under the model's wiring."""
    mode = model.config.ablation
    names = []
    for name, _ in model.named_parameters():
        if stage == "au_sft" and not name.startswith(REPRESENTATION_PREFIXES):
            continue
        if mode == "backbone_only":
            if stage == "pain" and not name.startswith(("backbone.", "baseline.")):
                continue
        elif name.startswith("baseline."):
            continue
        if mode == "no_gnn" and name.startswith("gnn."):
            continue
        if mode == "no_graph_rep" and name.startswith("proj.g."):
            continue
        names.append(name)
    return names


def _make_optimizer(model, names, config: TrainConfig):
    params = dict(model.named_parameters())
    # classical L2 decay inside the gradient (not decoupled)
    return torch.optim.Adam([params[n] for n in names], lr=config.lr,
                            betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)


def _resolve_images(manifest, images, root):
    if images is None:
        return load_images(manifest, root)
    if len(images) != len(manifest):
        raise ShapeMismatch(f"{len(images)} images for {len(manifest)} records")
    return np.asarray(images, dtype=np.float32)


def _subset(images, manifest, part):
    index = {fid: i for i, fid in enumerate(manifest.frame_ids)}
    return images[[index[fid] for fid in part.frame_ids]]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_loss(loss, stage, epoch):
    if not math.isfinite(float(loss.detach())):
        raise NumericFailure(f"{stage}: non-finite loss {float(loss.detach())} in epoch {epoch}")


def _append_log(log_path, entry):
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _snapshot(model, history, epoch, metrics, modeled_aus) -> Checkpoint:
    return Checkpoint(canonical_state(model), model.config, history, epoch, metrics,
                      list(modeled_aus) if modeled_aus is not None else None)


def predict(model: GraphAUPain, images: np.ndarray, batch_size: int = 128) -> dict:
    """Eval-mode logits and AU probabilities for an ``N x 3 x H x W`` array."""
    model.eval()
    dtype = next(model.parameters()).dtype
    logits, probs = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size])).to(dtype)
            out = model(x)
            logits.append(out.logits.numpy())
            if out.probs is not None:
                probs.append(out.probs.numpy())
    if model.config.ablation == "backbone_only":
        all_probs = None
    else:
        all_probs = np.concatenate(probs) if probs else np.zeros((0, model.config.n_au))
    return {
        "logits": np.concatenate(logits) if logits else np.zeros((0, model.config.d_pain)),
        "probs": all_probs,
    }


# ---------------------------------------------------------------- stages

def pretrain_au(model: GraphAUPain, manifest: DatasetManifest, config: TrainConfig,
                images: Optional[np.ndarray] = None, root: str = ".",
                init: Optional[Checkpoint] = None, log_path=None) -> Checkpoint:
    """Supervised AU-occurrence training of the backbone and AU branch.

    Only representation parameters are optimised; projections and classifier
    are left untouched.  ``model`` is updated in place.
    """
    config.validate()
    if len(manifest) == 0:
        raise EmptyDataset("AU pretraining needs at least one frame")
    if len(manifest.modeled_aus) != model.config.n_au:
        raise IncompatibleCheckpoint(
            f"manifest models {len(manifest.modeled_aus)} AUs, model has {model.config.n_au} nodes"
        )
    if model.config.ablation == "backbone_only":
        raise ConfigError("backbone_only has no AU branch to pretrain")
    history = list(init.history) if init is not None else []
    if init is not None:
        _check_compatible(init, model)
        apply_state(model, init.params, REPRESENTATION_PREFIXES)
    history.append(config.to_dict())
    metrics = []
    if config.epochs == 0:
        return _snapshot(model, history, 0, metrics, manifest.modeled_aus)

    images = _resolve_images(manifest, images, root)
    targets = np.array([r.occurrence_vector(manifest.modeled_aus) for r in manifest.records], dtype=np.float32)
    pos_weight = torch.as_tensor(au_positive_weights(manifest), dtype=torch.float32)
    dtype = next(model.parameters()).dtype
    opt = _make_optimizer(model, active_parameter_names(model, "au_sft"), config)
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, seen = 0.0, 0
        pred_bits = np.zeros_like(targets)
        for idx in _batches(len(images), config.batch_size, rng):
            x = torch.from_numpy(images[idx]).to(dtype)
            y = torch.from_numpy(targets[idx]).to(dtype)
            p, bits, _ = model.au_forward(x)
            loss = au_bce_loss(p, y, pos_weight.to(dtype), config.eps)
            _check_loss(loss, "au_sft", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
            pred_bits[idx] = bits.detach().numpy()
        report = au_report(pred_bits, targets, manifest.modeled_aus)
        entry = {"stage": "au_sft", "epoch": epoch, "loss": total / seen,
                 "au_f1_mean": report["f1_mean"], "au_acc_mean": report["acc_mean"]}
        metrics.append(entry)
        _append_log(log_path, entry)
        log.info("au_sft epoch %d loss %.4f mean AU F1 %.2f", epoch, entry["loss"], entry["au_f1_mean"])
    return _snapshot(model, history, config.epochs, metrics, manifest.modeled_aus)


def _check_compatible(init: Checkpoint, model: GraphAUPain) -> None:
    keys = ("backbone", "n_au", "d_au", "positions", "channels", "image_side", "desk_widths")
    a, b = init.model_config.to_dict(), model.config.to_dict()
    diff = [k for k in keys if a[k] != b[k]]
    if diff:
        raise IncompatibleCheckpoint(f"initial checkpoint differs from model config in {diff}")


def resolve_class_weights(config: TrainConfig, manifest: DatasetManifest) -> np.ndarray:
    n = len(SCHEMES[config.scheme])
    cw = config.class_weights
    if cw is None:
        return compute_class_weights(manifest, config.scheme)
    if isinstance(cw, str):
        if cw != "uniform":
            raise ConfigError(f"class_weights must be 'uniform', explicit values, or unset; got {cw!r}")
        return np.ones(n)
    cw = np.asarray(cw, dtype=np.float64)
    if cw.shape != (n,) or np.any(cw <= 0):
        raise ConfigError(f"need {n} positive class weights, got {cw.tolist()}")
    return cw


def train_pain(model: GraphAUPain, manifest: DatasetManifest, config: TrainConfig,
               init: Optional[Checkpoint] = None, images: Optional[np.ndarray] = None,
               root: str = ".", val_manifest: Optional[DatasetManifest] = None,
               val_images: Optional[np.ndarray] = None, log_path=None) -> Checkpoint:
    """Pain-category training of the whole model with weighted cross-entropy.

    With ``init`` the backbone and AU branch are loaded from it and the
    projections/classifier are freshly initialised from ``config.seed``.
    Unless ``val_manifest`` is given, a subject-disjoint ``val_fraction`` of the
    training subjects is held out for per-epoch validation metrics.
    """
    config.validate()
    if len(manifest) == 0:
        raise EmptyDataset("pain training needs at least one frame")
    n_classes = len(SCHEMES[config.scheme])
    if model.config.d_pain != n_classes:
        raise IncompatibleCheckpoint(
            f"model has {model.config.d_pain} outputs but scheme {config.scheme} has {n_classes} classes"
        )
    history = []
    if init is not None:
        _check_compatible(init, model)
        apply_state(model, init.params, REPRESENTATION_PREFIXES)
        model.reset_parameters(config.seed, prefixes=HEAD_PREFIXES)
        history = list(init.history)
    history.append(config.to_dict())
    if config.epochs == 0:
        return _snapshot(model, history, 0, [], manifest.modeled_aus)

    images = _resolve_images(manifest, images, root)
    train_m, train_x = manifest, images
    if val_manifest is not None:
        val_x = _resolve_images(val_manifest, val_images, root)
    elif config.val_fraction > 0 and len(manifest.subjects) >= 2:
        train_m, val_manifest = split_subject_disjoint(manifest, config.val_fraction, config.seed)
        train_x, val_x = _subset(images, manifest, train_m), _subset(images, manifest, val_manifest)
    weights = resolve_class_weights(config, train_m)
    labels = np.array([r.label(config.scheme) for r in train_m.records])
    dtype = next(model.parameters()).dtype
    w = torch.as_tensor(weights, dtype=dtype)
    opt = _make_optimizer(model, active_parameter_names(model, "pain"), config)
    rng = np.random.default_rng(config.seed)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        total = 0.0
        for idx in _batches(len(train_x), config.batch_size, rng):
            x = torch.from_numpy(train_x[idx]).to(dtype)
            y = one_hot(labels[idx], n_classes, dtype)
            loss = weighted_ce_loss(model(x).logits, y, w, config.eps)
            _check_loss(loss, "pain", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        entry = {"stage": "pain", "epoch": epoch, "loss": total / len(train_x),
                 "class_weights": [float(v) for v in weights]}
        if val_manifest is not None and len(val_manifest):
            out = predict(model, val_x)
            val_labels = [r.label(config.scheme) for r in val_manifest.records]
            rep = metrics_from_confusion(confusion(out["logits"].argmax(1), val_labels, n_classes))
            entry.update(val_macro_f1=rep.macro_f1, val_accuracy=rep.accuracy)
        metrics.append(entry)
        _append_log(log_path, entry)
        log.info("pain epoch %d loss %.4f", epoch, entry["loss"])
    return _snapshot(model, history, config.epochs, metrics, manifest.modeled_aus)
