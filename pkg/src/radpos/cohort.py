"""Patients, radiologist ROIs, biopsy cores, and the cohort manifest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ManifestIntegrityError, MissingFileError, UndefinedTruthError

MANIFEST_VERSION = 1
SCALE_RANGES = {"UCLA": (0, 5), "PIRADS": (1, 5)}
DEFAULT_CUTOFF = {"UCLA": 3, "PIRADS": 3}
CORE_KINDS = ("targeted", "systematic")
SPLITS = ("train", "test", "external")


def check_grade(group: int) -> int:
    """Validate a grade group (0 benign, 1 = 3+3, 2 = 3+4, 3 = 4+3, 4-5 higher)."""
    if isinstance(group, bool) or int(group) != group or not 0 <= group <= 5:
        raise ValueError(f"grade group must be an integer in [0, 5], got {group!r}")
    return int(group)


@dataclass(frozen=True)
class SuspicionScore:
    scale: str
    value: int

    def __post_init__(self):
        if self.scale not in SCALE_RANGES:
            raise ValueError(f"unknown scale {self.scale!r}")
        lo, hi = SCALE_RANGES[self.scale]
        if int(self.value) != self.value or not lo <= self.value <= hi:
            raise ValueError(f"{self.scale} score must be in [{lo}, {hi}], got {self.value!r}")


@dataclass(frozen=True)
class SignificanceRule:
    """Clinically significant cancer means grade group >= ``min_grade_group``."""

    min_grade_group: int = 2

    def __post_init__(self):
        if int(self.min_grade_group) != self.min_grade_group or not 1 <= self.min_grade_group <= 5:
            raise ValueError(f"min_grade_group must be in [1, 5], got {self.min_grade_group!r}")


def is_significant(grade: int, rule: SignificanceRule) -> bool:
    return check_grade(grade) >= rule.min_grade_group


# ---------------------------------------------------------------------------
# run-length encoding of voxel sets (storage-order offsets)
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, stops = edges[0::2], edges[1::2]
    return tuple((int(s), int(e - s)) for s, e in zip(starts, stops))


def rle_offsets(rle) -> np.ndarray:
    if not rle:
        return np.zeros(0, dtype=np.intp)
    return np.concatenate([np.arange(s, s + n, dtype=np.intp) for s, n in rle])


def rle_decode(rle, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    flat[rle_offsets(rle)] = True
    return flat.reshape(shape, order="F")


def _check_rle(rle) -> tuple[tuple[int, int], ...]:
    runs = tuple((int(s), int(n)) for s, n in rle)
    if not runs:
        raise ValueError("ROI voxel set must be non-empty")
    end = -1
    for start, length in runs:
        if start < 0 or length < 1:
            raise ValueError(f"invalid run ({start}, {length})")
        if start < end:
            raise ValueError("runs must be sorted and non-overlapping")
        end = start + length
    return runs


@dataclass(frozen=True)
class RoiAnnotation:
    roi_id: str
    rle: tuple[tuple[int, int], ...]
    score: SuspicionScore
    pathology: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "rle", _check_rle(self.rle))
        if self.pathology is not None:
            object.__setattr__(self, "pathology", check_grade(self.pathology))

    @property
    def size(self) -> int:
        return sum(n for _, n in self.rle)

    def offsets(self) -> np.ndarray:
        return rle_offsets(self.rle)

    def mask(self, shape) -> np.ndarray:
        return rle_decode(self.rle, shape)


@dataclass(frozen=True)
class BiopsyCore:
    core_id: str
    kind: str
    grade: int
    ijk: tuple[int, int, int]
    roi_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in CORE_KINDS:
            raise ValueError(f"core kind must be one of {CORE_KINDS}, got {self.kind!r}")
        if (self.kind == "targeted") != (self.roi_id is not None):
            raise ManifestIntegrityError(
                f"core {self.core_id!r}: targeted cores need a roi_id, systematic cores must not have one"
            )
        object.__setattr__(self, "grade", check_grade(self.grade))
        ijk = tuple(int(c) for c in self.ijk)
        if len(ijk) != 3 or min(ijk) < 0:
            raise ValueError(f"core {self.core_id!r}: bad voxel index {self.ijk!r}")
        object.__setattr__(self, "ijk", ijk)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    bundle: str
    rois: tuple[RoiAnnotation, ...] = ()
    cores: tuple[BiopsyCore, ...] = ()
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "rois", tuple(self.rois))
        object.__setattr__(self, "cores", tuple(self.cores))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [r.roi_id for r in self.rois]
        if len(set(ids)) != len(ids):
            raise ManifestIntegrityError(f"patient {self.patient_id!r}: duplicate ROI ids")
        known = set(ids)
        for core in self.cores:
            if core.roi_id is not None and core.roi_id not in known:
                raise ManifestIntegrityError(
                    f"patient {self.patient_id!r}: core {core.core_id!r} references unknown ROI {core.roi_id!r}"
                )

    def positive_rois(self, cutoff: int) -> list[RoiAnnotation]:
        """Radiologist-positive ROIs: score at or above ``cutoff``."""
        return [r for r in self.rois if r.score.value >= cutoff]

    def roi(self, roi_id: str) -> RoiAnnotation:
        for r in self.rois:
            if r.roi_id == roi_id:
                return r
        raise KeyError(roi_id)


def patient_truth_label(record: PatientRecord, rule: SignificanceRule) -> bool:
    """True iff any biopsy core (targeted or systematic) is significant."""
    if not record.cores:
        raise UndefinedTruthError(f"patient {record.patient_id!r} has no biopsy cores")
    return any(is_significant(c.grade, rule) for c in record.cores)


def radiologist_patient_call(record: PatientRecord, cutoff: int, scale: str = "UCLA") -> bool:
    lo, hi = SCALE_RANGES[scale]
    if not lo <= cutoff <= hi:
        raise ValueError(f"{scale} cutoff must be in [{lo}, {hi}], got {cutoff}")
    return any(r.score.value >= cutoff for r in record.rois)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class Cohort:
    """Records plus the manifest-level metadata they were loaded with."""

    records: list[PatientRecord] = field(default_factory=list)
    scale: str = "UCLA"
    root: Path = Path(".")

    def bundle_path(self, record: PatientRecord) -> Path:
        return self.root / record.bundle

    def split(self, name: str) -> list[PatientRecord]:
        return [r for r in self.records if r.split == name]


def _record_to_dict(record: PatientRecord) -> dict:
    return {
        "patient_id": record.patient_id,
        "bundle": record.bundle,
        "rois": [
            {
                "roi_id": r.roi_id,
                "score": r.score.value,
                "rle": [list(run) for run in r.rle],
                "pathology": r.pathology,
            }
            for r in record.rois
        ],
        "cores": [
            {"core_id": c.core_id, "kind": c.kind, **({"roi_id": c.roi_id} if c.roi_id is not None else {}),
             "grade": c.grade, "ijk": list(c.ijk)}
            for c in record.cores
        ],
        "split": record.split,
    }


def manifest_text(records: Sequence[PatientRecord], scale: str = "UCLA") -> str:
    doc = {
        "version": MANIFEST_VERSION,
        "scale": scale,
        "patients": [_record_to_dict(r) for r in records],
    }
    return json.dumps(doc, indent=1) + "\n"


def save_manifest(records: Iterable[PatientRecord], path, scale: str = "UCLA") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest_text(list(records), scale), encoding="utf-8")
    return path


def _record_from_dict(entry: dict, scale: str) -> PatientRecord:
    try:
        pid = entry["patient_id"]
        rois = tuple(
            RoiAnnotation(
                roi_id=r["roi_id"],
                rle=tuple(tuple(run) for run in r["rle"]),
                score=SuspicionScore(scale, r["score"]),
                pathology=r.get("pathology"),
            )
            for r in entry.get("rois", [])
        )
        cores = tuple(
            BiopsyCore(
                core_id=c["core_id"],
                kind=c["kind"],
                grade=c["grade"],
                ijk=tuple(c["ijk"]),
                roi_id=c.get("roi_id"),
            )
            for c in entry.get("cores", [])
        )
        return PatientRecord(pid, entry["bundle"], rois, cores, entry.get("split", "train"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestIntegrityError(
            f"patient {entry.get('patient_id', '?')!r}: {type(exc).__name__}: {exc}"
        ) from None


def load_cohort(path, check_bundles: bool = True) -> Cohort:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest {path} not found")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestIntegrityError(f"unsupported manifest version {doc.get('version')!r}")
    scale = doc.get("scale", "UCLA")
    if scale not in SCALE_RANGES:
        raise ManifestIntegrityError(f"unknown scale {scale!r}")
    records = [_record_from_dict(e, scale) for e in doc.get("patients", [])]
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestIntegrityError("duplicate patient ids")
    cohort = Cohort(records, scale, path.parent)
    if check_bundles:
        missing = [r.patient_id for r in records if not (cohort.bundle_path(r) / "meta.json").is_file()]
        if missing:
            raise MissingFileError(f"missing bundle for patients: {', '.join(missing)}")
    return cohort


def load_manifest(path, check_bundles: bool = True) -> list[PatientRecord]:
    return load_cohort(path, check_bundles).records


def with_pathology(roi: RoiAnnotation, grade: Optional[int]) -> RoiAnnotation:
    return replace(roi, pathology=grade)
