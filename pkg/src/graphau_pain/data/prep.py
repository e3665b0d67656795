"""Manifest transformations: undersampling, hybrid relabeling, class weights, splits."""
from __future__ import annotations

import hashlib
from dataclasses import replace
from typing import Mapping, Sequence

import numpy as np

from ..errors import DataError, EmptyCategory, MissingPrediction, OverlappingSets, TooFewSubjects
from ..facs import SCHEMES
from .manifest import DatasetManifest

DEFAULT_KEEP_RATE = 0.1


def frame_rng(seed: int, frame_id: str, purpose: str) -> np.random.Generator:
    """Random stream for one frame, independent of processing order."""
    digest = hashlib.sha256(f"{purpose}:{frame_id}".encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def has_active_au(record, modeled_aus) -> bool:
    return any(record.occurrence[c] for c in modeled_aus)


def undersample(manifest: DatasetManifest, keep_rate: float = DEFAULT_KEEP_RATE,
                seed: int = 0) -> DatasetManifest:
    """Drop frames with no active modeled AU, then keep each PSPI=0 frame with
    probability ``keep_rate``.  Frames with PSPI>0 and an active AU always survive.
    """
    if not 0.0 < keep_rate <= 1.0:
        raise DataError(f"keep_rate must be in (0, 1], got {keep_rate}")
    kept, n_inactive, n_dropped = [], 0, 0
    for r in manifest.records:
        if not has_active_au(r, manifest.modeled_aus):
            n_inactive += 1
            continue
        if r.pspi == 0 and frame_rng(seed, r.frame_id, "undersample").random() >= keep_rate:
            n_dropped += 1
            continue
        kept.append(r)
    return manifest.derive(
        kept,
        op="undersample",
        seed=int(seed),
        keep_rate=float(keep_rate),
        excluded_inactive=n_inactive,
        dropped_pspi0=n_dropped,
    )


def merge_hybrid(original: DatasetManifest, predicted: Mapping[str, Mapping[int, int]],
                 overlap_set: Sequence[int], fill_set: Sequence[int]) -> DatasetManifest:
    """Keep original occurrence bits on ``overlap_set``; take ``fill_set`` bits from
    model predictions."""
    overlap, fill = set(overlap_set), set(fill_set)
    if overlap & fill:
        raise OverlappingSets(f"AUs {sorted(overlap & fill)} are in both overlap and fill sets")
    if overlap | fill != set(original.modeled_aus):
        raise DataError(
            f"overlap {sorted(overlap)} and fill {sorted(fill)} must cover the modeled set "
            f"{list(original.modeled_aus)}"
        )
    records = []
    for r in original.records:
        if r.frame_id not in predicted:
            raise MissingPrediction(f"no prediction for frame {r.frame_id!r}")
        pred = {int(k): int(v) for k, v in predicted[r.frame_id].items()}
        for c in fill:
            if pred.get(c) not in (0, 1):
                raise MissingPrediction(f"frame {r.frame_id!r}: no 0/1 prediction for AU{c}")
        occurrence = {c: (r.occurrence[c] if c in overlap else pred[c]) for c in original.modeled_aus}
        pred_modeled = {c: pred[c] for c in sorted(pred) if c in original.modeled_aus}
        records.append(replace(r, occurrence=occurrence, predicted_au=pred_modeled))
    out = original.derive(records, op="merge_hybrid", overlap=sorted(overlap), fill=sorted(fill))
    out.provenance["relabel"] = "hybrid"
    return out


def class_weights_from_rates(rates) -> np.ndarray:
    """w_j = C * (1/rate_j) / sum_k (1/rate_k)."""
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates <= 0):
        raise EmptyCategory(f"category {int(np.argmin(rates))} has zero occurrence rate")
    inv = 1.0 / rates
    return len(rates) * inv / inv.sum()


def category_counts(manifest: DatasetManifest, scheme: str = "3cat") -> np.ndarray:
    n = len(SCHEMES[scheme])
    counts = np.zeros(n, dtype=np.int64)
    for r in manifest.records:
        counts[r.label(scheme)] += 1
    return counts


def compute_class_weights(manifest: DatasetManifest, scheme: str = "3cat") -> np.ndarray:
    counts = category_counts(manifest, scheme)
    for idx, c in enumerate(counts):
        if c == 0:
            raise EmptyCategory(f"category {SCHEMES[scheme](idx).name} never occurs")
    return class_weights_from_rates(counts / counts.sum())


def _n_test(n: int, test_fraction: float) -> int:
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    return min(max(int(np.floor(n * test_fraction + 0.5)), 1), n - 1)


def split_subject_disjoint(manifest: DatasetManifest, test_fraction: float,
                           seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise TooFewSubjects(f"need at least 2 subjects to split, got {len(subjects)}")
    perm = np.random.default_rng(seed).permutation(len(subjects))
    test_subjects = {subjects[i] for i in perm[: _n_test(len(subjects), test_fraction)]}
    train = [r for r in manifest.records if r.subject_id not in test_subjects]
    test = [r for r in manifest.records if r.subject_id in test_subjects]
    info = dict(op="split", by="subject", seed=int(seed), test_fraction=float(test_fraction))
    return (manifest.derive(train, part="train", **info),
            manifest.derive(test, part="test", **info))


def split_frames(manifest: DatasetManifest, test_fraction: float,
                 seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Frame-wise split.  Leaks subject identity across sides; off by default."""
    n = len(manifest)
    if n < 2:
        raise DataError("need at least 2 frames to split")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[: _n_test(n, test_fraction)].tolist())
    train = [r for i, r in enumerate(manifest.records) if i not in test_idx]
    test = [r for i, r in enumerate(manifest.records) if i in test_idx]
    info = dict(op="split", by="frame", seed=int(seed), test_fraction=float(test_fraction))
    return (manifest.derive(train, part="train", **info),
            manifest.derive(test, part="test", **info))
