"""Metrics, confusion matrices and report tables.

All percentages are in [0, 100].  Averages are unweighted means over classes
(or over AUs).  A 0/0 ratio is reported as 0 and flagged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, EmptyDataset, EmptyMatrix, IncompatibleCheckpoint, LengthMismatch
from .facs import SCHEMES


@dataclass
class MetricsReport:
    precision: list
    recall: list
    f1: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    confusion: np.ndarray
    class_names: list
    zero_division: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "zero_division": self.zero_division,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["precision"], d["recall"], d["f1"], d["macro_precision"], d["macro_recall"],
                   d["macro_f1"], d["accuracy"], np.asarray(d["confusion"], dtype=np.int64),
                   d["class_names"], d.get("zero_division", {}))


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"category index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num, den):
    return (num / den, False) if den > 0 else (0.0, True)


def metrics_from_confusion(cm, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0 or cm.sum() == 0:
        raise EmptyMatrix("confusion matrix is empty")
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    diag, colsum, rowsum = np.diag(cm), cm.sum(0), cm.sum(1)
    precision, recall, f1, flags = [], [], [], {}
    for j in range(n):
        p, zp = _ratio(diag[j], colsum[j])
        r, zr = _ratio(diag[j], rowsum[j])
        f, zf = _ratio(2 * p * r, p + r)
        precision.append(100.0 * p)
        recall.append(100.0 * r)
        f1.append(100.0 * f)
        hit = [m for m, z in (("precision", zp), ("recall", zr), ("f1", zf)) if z]
        if hit:
            flags[names[j]] = hit
    return MetricsReport(
        precision, recall, f1,
        float(np.mean(precision)), float(np.mean(recall)), float(np.mean(f1)),
        100.0 * float(np.trace(cm)) / float(cm.sum()), cm, names, flags,
    )


def binary_f1_acc(pred: np.ndarray, true: np.ndarray) -> tuple[float, float, bool]:
    """Percent F1 and accuracy for one binary column; flag marks a 0/0 F1."""
    pred, true = np.asarray(pred).astype(bool), np.asarray(true).astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    f, zero = _ratio(2 * tp, 2 * tp + fp + fn)
    acc = float(np.mean(pred == true)) if len(pred) else 0.0
    return 100.0 * f, 100.0 * acc, zero


def au_report(pred_bits, true_bits, modeled_aus) -> dict:
    pred_bits, true_bits = np.asarray(pred_bits), np.asarray(true_bits)
    if pred_bits.shape != true_bits.shape:
        raise LengthMismatch(f"predictions {pred_bits.shape} vs labels {true_bits.shape}")
    rows = {}
    for j, code in enumerate(modeled_aus):
        f, a, zero = binary_f1_acc(pred_bits[:, j], true_bits[:, j])
        rows[f"AU{code}"] = {"f1": f, "acc": a, "zero_division": zero}
    return {
        "per_au": rows,
        "f1_mean": float(np.mean([r["f1"] for r in rows.values()])),
        "acc_mean": float(np.mean([r["acc"] for r in rows.values()])),
    }


# ---------------------------------------------------------------- rendering

def log10_scaled(count: int) -> float:
    return math.log10(1 + count)


def render_confusion_log10(cm, class_names: Optional[Sequence[str]] = None) -> str:
    """Text grid: each cell shows log10(1 + count) with the raw count beneath."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    raw_len = len(str(int(cm.max()))) + 2 if cm.size else 3  # counts are shown in parentheses
    width = max([len(nm) for nm in names] + [raw_len, 6]) + 2
    head = "true\\pred".ljust(width) + "".join(nm.rjust(width) for nm in names)
    lines = [head]
    for i in range(n):
        scaled = names[i].ljust(width) + "".join(f"{log10_scaled(int(c)):.2f}".rjust(width) for c in cm[i])
        raw = "".ljust(width) + "".join(f"({int(c)})".rjust(width) for c in cm[i])
        lines += [scaled, raw]
    return "\n".join(lines) + "\n"


def parse_confusion_text(text: str) -> np.ndarray:
    """Recover raw counts from :func:`render_confusion_log10` output."""
    rows = []
    for line in text.splitlines()[1:]:
        tokens = line.split()
        if tokens and all(t.startswith("(") and t.endswith(")") for t in tokens):
            rows.append([int(t[1:-1]) for t in tokens])
    return np.asarray(rows, dtype=np.int64)


def render_confusion_png(cm, path, class_names: Optional[Sequence[str]] = None, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(cm, dtype=np.int64)
    n = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n)]
    scaled = np.log10(1 + cm)
    fig, ax = plt.subplots(figsize=(1.2 * n + 1.5, 1.2 * n + 1))
    ax.imshow(scaled, cmap="Blues", vmin=0, vmax=max(float(scaled.max()), 1e-9))
    for i in range(n):
        for j in range(n):
            dark = scaled[i, j] > 0.6 * scaled.max()
            ax.text(j, i, f"{scaled[i, j]:.2f}\n({cm[i, j]})", ha="center", va="center",
                    color="white" if dark else "black", fontsize=9)
    ax.set_xticks(range(n), names)
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def format_pain_table(report: MetricsReport) -> str:
    names = list(report.class_names)
    w = max(10, max(len(n) for n in names) + 2)
    lines = ["Metric".ljust(11) + "".join(n.rjust(w) for n in names) + "Overall".rjust(w)]
    for label, vals, overall in (("F1-score", report.f1, report.macro_f1),
                                 ("Recall", report.recall, report.macro_recall),
                                 ("Precision", report.precision, report.macro_precision)):
        lines.append(label.ljust(11) + "".join(f"{v:.2f}".rjust(w) for v in vals) + f"{overall:.2f}".rjust(w))
    lines.append("Accuracy".ljust(11) + "".join("-".rjust(w) for _ in names) + f"{report.accuracy:.2f}".rjust(w))
    return "\n".join(lines) + "\n"


def format_au_table(au: dict) -> str:
    names = list(au["per_au"])
    lines = ["Metric".ljust(8) + "".join(n.rjust(8) for n in names) + "Avg".rjust(8)]
    lines.append("F1".ljust(8) + "".join(f"{au['per_au'][n]['f1']:.2f}".rjust(8) for n in names)
                 + f"{au['f1_mean']:.2f}".rjust(8))
    lines.append("Acc.".ljust(8) + "".join(f"{au['per_au'][n]['acc']:.2f}".rjust(8) for n in names)
                 + f"{au['acc_mean']:.2f}".rjust(8))
    return "\n".join(lines) + "\n"


ABLATION_LABELS = {
    "full": "Full",
    "no_graph_rep": "w/o graph rep.",
    "no_gnn": "w/o GNN",
    "backbone_only": "Only backbone",
}


def format_ablation_table(reports: dict) -> str:
    """``reports`` maps ablation mode -> MetricsReport; one row per mode."""
    first = next(iter(reports.values()))
    names = list(first.class_names) + ["Mean"]
    cols = []
    for metric in ("F1", "Precision", "Recall"):
        cols += [f"{metric}:{n}" for n in names]
    w = max(len(c) for c in cols) + 2
    lines = ["Model".ljust(16) + "".join(c.rjust(w) for c in cols)]
    for mode, rep in reports.items():
        vals = (list(rep.f1) + [rep.macro_f1] + list(rep.precision) + [rep.macro_precision]
                + list(rep.recall) + [rep.macro_recall])
        lines.append(ABLATION_LABELS.get(mode, mode).ljust(16) + "".join(f"{v:.1f}".rjust(w) for v in vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- model evaluation

def evaluate_model(model, manifest, scheme: str = "3cat", images=None, root: str = ".",
                   batch_size: int = 128):
    """Eval-mode pass over ``manifest``; returns ``(MetricsReport, au_report or None)``."""
    from .data.images import load_images
    from .training import predict

    if len(manifest) == 0:
        raise EmptyDataset("nothing to evaluate")
    categories = SCHEMES[scheme]
    if model.config.d_pain != len(categories):
        raise IncompatibleCheckpoint(
            f"model has {model.config.d_pain} outputs; scheme {scheme} needs {len(categories)}"
        )
    if images is None:
        images = load_images(manifest, root)
    out = predict(model, images, batch_size)
    labels = [r.label(scheme) for r in manifest.records]
    report = metrics_from_confusion(
        confusion(out["logits"].argmax(1), labels, len(categories)), [c.name for c in categories]
    )
    au = None
    if out["probs"] is not None and len(manifest.modeled_aus) == model.config.n_au:
        truth = np.array([r.occurrence_vector(manifest.modeled_aus) for r in manifest.records])
        au = au_report(out["probs"] >= model.threshold, truth, manifest.modeled_aus)
    return report, au


def write_reports(out_dir, report: MetricsReport, au: Optional[dict], png: bool = False, stem: str = "report"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"pain": report.to_dict(), "au": au}
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    text = format_pain_table(report)
    if au is not None:
        text += "\n" + format_au_table(au)
    (out_dir / f"{stem}.txt").write_text(text, encoding="utf-8")
    (out_dir / "confusion.txt").write_text(render_confusion_log10(report.confusion, report.class_names),
                                           encoding="utf-8")
    if png:
        render_confusion_png(report.confusion, out_dir / "confusion.png", report.class_names)
