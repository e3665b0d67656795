"""Frame records and the JSON-lines manifest format.

A manifest file holds one JSON object per line.  Manifest-level metadata
(the modeled AU set and provenance) lives in a sidecar ``<name>.meta.json``
so the record file itself stays one-record-per-line.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from ..errors import DataError, DuplicateFrameId, ParseError
from ..facs import (
    AU_CODES,
    PSPI_AUS,
    PainCategory3,
    PainCategory4,
    categorize_pain_3,
    categorize_pain_4,
    compute_pspi,
    to_occurrence,
    validate_intensities,
)

DEFAULT_MODELED_AUS = (1, 2, 4, 6, 9, 12, 25, 26)
RECORD_KEYS = ("frame_id", "subject_id", "image_ref", "au", "pspi", "label3", "label4",
               "predicted_au", "occurrence")
REQUIRED_KEYS = frozenset(RECORD_KEYS) - {"predicted_au"}


def check_modeled_aus(codes: Iterable[int], n_au: Optional[int] = None) -> tuple[int, ...]:
    codes = tuple(int(c) for c in codes)
    if list(codes) != sorted(set(codes)):
        raise DataError(f"modeled AU codes must be unique and ascending: {codes}")
    unknown = [c for c in codes if c not in AU_CODES]
    if unknown:
        raise DataError(f"unrecognized AU codes {unknown}")
    if n_au is not None and len(codes) != n_au:
        raise DataError(f"expected {n_au} modeled AUs, got {len(codes)}")
    return codes


@dataclass(frozen=True)
class AUFrameRecord:
    frame_id: str
    subject_id: str
    image_ref: str
    au: dict
    pspi: int
    label3: PainCategory3
    label4: PainCategory4
    occurrence: dict
    predicted_au: Optional[dict] = None

    def label(self, scheme: str) -> int:
        return int(self.label3 if scheme == "3cat" else self.label4)

    def occurrence_vector(self, modeled_aus) -> list[int]:
        return [self.occurrence[c] for c in modeled_aus]


def make_record(frame_id: str, subject_id: str, image_ref: str, au: Mapping[int, int],
                modeled_aus=DEFAULT_MODELED_AUS) -> AUFrameRecord:
    """Build a record whose PSPI, labels and occurrence bits are derived from ``au``."""
    au = {int(k): int(v) for k, v in sorted(au.items())}
    pspi = compute_pspi(au)
    occ = to_occurrence(au)
    missing = [c for c in modeled_aus if c not in occ]
    if missing:
        raise DataError(f"{frame_id}: no intensity for modeled AUs {missing}")
    return AUFrameRecord(
        frame_id=frame_id,
        subject_id=subject_id,
        image_ref=image_ref,
        au=au,
        pspi=pspi,
        label3=categorize_pain_3(pspi),
        label4=categorize_pain_4(pspi),
        occurrence={c: occ[c] for c in modeled_aus},
    )


@dataclass
class DatasetManifest:
    records: list
    modeled_aus: tuple = DEFAULT_MODELED_AUS
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.modeled_aus = check_modeled_aus(self.modeled_aus)
        self.records = sorted(self.records, key=lambda r: r.frame_id)
        seen = set()
        for r in self.records:
            if r.frame_id in seen:
                raise DuplicateFrameId(f"duplicate frame_id {r.frame_id!r}")
            seen.add(r.frame_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def frame_ids(self) -> list[str]:
        return [r.frame_id for r in self.records]

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.records})

    def derive(self, records, **provenance) -> "DatasetManifest":
        """New manifest over ``records`` with provenance entries appended."""
        prov = dict(self.provenance)
        history = list(prov.get("history", []))
        if provenance:
            history.append(provenance)
        prov["history"] = history
        return DatasetManifest(list(records), self.modeled_aus, prov)


def _codes_obj(d: Mapping[int, int]) -> dict:
    return {str(k): int(v) for k, v in sorted(d.items())}


def record_to_json(r: AUFrameRecord) -> str:
    obj = {
        "frame_id": r.frame_id,
        "subject_id": r.subject_id,
        "image_ref": r.image_ref,
        "au": _codes_obj(r.au),
        "pspi": r.pspi,
        "label3": r.label3.name,
        "label4": r.label4.name,
    }
    if r.predicted_au is not None:
        obj["predicted_au"] = _codes_obj(r.predicted_au)
    obj["occurrence"] = _codes_obj(r.occurrence)
    return json.dumps(obj)


def _parse_codes(obj, what, lineno) -> dict:
    if not isinstance(obj, dict):
        raise ParseError(f"{what} must be an object", lineno)
    out = {}
    for k, v in obj.items():
        try:
            code = int(k)
        except ValueError:
            raise ParseError(f"{what}: bad AU code {k!r}", lineno) from None
        if isinstance(v, bool) or not isinstance(v, int):
            raise ParseError(f"{what}: AU{code} value must be an integer", lineno)
        out[code] = v
    return dict(sorted(out.items()))


def record_from_json(line: str, modeled_aus, lineno: Optional[int] = None) -> AUFrameRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", lineno)
    unknown = set(obj) - set(RECORD_KEYS)
    if unknown:
        raise ParseError(f"unknown keys {sorted(unknown)}", lineno)
    missing = REQUIRED_KEYS - set(obj)
    if missing:
        raise ParseError(f"missing keys {sorted(missing)}", lineno)
    for key in ("frame_id", "subject_id", "image_ref"):
        if not isinstance(obj[key], str) or not obj[key]:
            raise ParseError(f"{key} must be a non-empty string", lineno)
    au = _parse_codes(obj["au"], "au", lineno)
    occurrence = _parse_codes(obj["occurrence"], "occurrence", lineno)
    predicted = obj.get("predicted_au")
    if predicted is not None:
        predicted = _parse_codes(predicted, "predicted_au", lineno)
    try:
        validate_intensities(au)
        label3 = PainCategory3[obj["label3"]]
        label4 = PainCategory4[obj["label4"]]
    except KeyError as exc:
        raise ParseError(f"unknown category {exc}", lineno) from None
    except DataError as exc:
        raise ParseError(str(exc), lineno) from None
    pspi = obj["pspi"]
    if isinstance(pspi, bool) or not isinstance(pspi, int) or not 0 <= pspi <= 16:
        raise ParseError("pspi must be an integer in [0, 16]", lineno)
    if all(c in au for c in PSPI_AUS) and compute_pspi(au) != pspi:
        raise ParseError(f"pspi {pspi} disagrees with AU intensities", lineno)
    if categorize_pain_3(pspi) != label3 or categorize_pain_4(pspi) != label4:
        raise ParseError("labels disagree with pspi", lineno)
    if sorted(occurrence) != list(modeled_aus):
        raise ParseError("occurrence keys must equal the modeled AU set", lineno)
    if any(v not in (0, 1) for v in occurrence.values()):
        raise ParseError("occurrence bits must be 0 or 1", lineno)
    if predicted is None:
        for c in modeled_aus:
            if c in au and occurrence[c] != min(au[c], 1):
                raise ParseError(f"occurrence of AU{c} disagrees with its intensity", lineno)
    return AUFrameRecord(
        frame_id=obj["frame_id"],
        subject_id=obj["subject_id"],
        image_ref=obj["image_ref"],
        au=au,
        pspi=pspi,
        label3=label3,
        label4=label4,
        occurrence=occurrence,
        predicted_au=predicted,
    )


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in manifest.records:
            fh.write(record_to_json(r) + "\n")
    meta = {"modeled_aus": list(manifest.modeled_aus), "provenance": manifest.provenance}
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    modeled, provenance = DEFAULT_MODELED_AUS, {}
    mp = meta_path(path)
    if mp.exists():
        try:
            meta = json.loads(mp.read_text(encoding="utf-8"))
            modeled = check_modeled_aus(meta["modeled_aus"])
            provenance = meta.get("provenance", {})
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad manifest metadata {mp}: {exc}") from None
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            r = record_from_json(line, modeled, lineno)
            if r.frame_id in seen:
                raise DuplicateFrameId(f"line {lineno}: duplicate frame_id {r.frame_id!r}")
            seen.add(r.frame_id)
            records.append(r)
    return DatasetManifest(records, modeled, provenance)


def manifest_root(path) -> str:
    """Directory against which relative image references resolve."""
    return os.path.dirname(os.path.abspath(path))


__all__ = [
    "AUFrameRecord",
    "DatasetManifest",
    "DEFAULT_MODELED_AUS",
    "check_modeled_aus",
    "load_manifest",
    "make_record",
    "manifest_root",
    "meta_path",
    "record_from_json",
    "record_to_json",
    "save_manifest",
]
