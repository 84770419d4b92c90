"""Gating radiologist-positive cases with the voxel classifier.

The ML model only ever sees cases the radiologist already called positive.
Fusing the two therefore leaves radiologist negatives untouched, keeps the
ML positives as the final positives, and moves ML negatives into the TN/FN
cells:

    TP' = +TP          FP' = +FP
    FN' = FN + +FN     TN' = TN + +TN
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .cohort import PatientRecord, RoiAnnotation, SignificanceRule, is_significant, patient_truth_label
from .errors import DegenerateInputError, DomainError, IncompatibleCountsError, MissingLabelError
from .volume import PROB_CHANNELS, VolumeBundle

SOURCES = ("Rad", "MLonPositives", "RadPlusML")
LEVELS = ("ROI", "Zone", "Patient")
CSV_COLUMNS = ("level", "source", "threshold", "tp", "fp", "tn", "fn", "sen", "spc")
DEFAULT_SPLITS = (2, 2, 5)  # lateral x anteroposterior x craniocaudal


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float = 0
    fp: float = 0
    tn: float = 0
    fn: float = 0
    source: str = "Rad"
    level: str = "Patient"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level!r}")
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f"counts must be non-negative: {self.as_tuple()}")

    def as_tuple(self):
        return (self.tp, self.fp, self.tn, self.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if (self.source, self.level) != (other.source, other.level):
            raise ValueError("cannot add counts from different sources or levels")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn,
                               self.fn + other.fn, self.source, self.level)


def tabulate(calls: Iterable[bool], truths: Iterable[bool], source: str, level: str) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for call, truth in zip(calls, truths, strict=True):
        if call and truth:
            tp += 1
        elif call:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, tn, fn, source, level)


# ---------------------------------------------------------------------------
# ROI decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiDecision:
    roi_id: str
    positive_fraction: float
    decision: bool
    threshold: float


def positive_voxels(prob_map: VolumeBundle) -> np.ndarray:
    """Flat (storage-order) mask of voxels whose argmax class is positive.

    Ties go to positive, then negative, then background.
    """
    missing = [c for c in PROB_CHANNELS if c not in prob_map]
    if missing:
        raise DegenerateInputError(f"probability map lacks channels {missing}")
    pos, neg, bg = (prob_map[c].ravel(order="F") for c in PROB_CHANNELS)
    return (pos >= neg) & (pos >= bg)


def positive_fraction(prob_map: VolumeBundle, roi: RoiAnnotation, _positive=None) -> float:
    offsets = roi.offsets()
    if offsets.size == 0:
        raise DegenerateInputError(f"ROI {roi.roi_id!r} is empty")
    positive = positive_voxels(prob_map) if _positive is None else _positive
    return int(np.count_nonzero(positive[offsets])) / offsets.size


def check_threshold(t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"threshold must be in [0, 1], got {t}")
    return float(t)


def classify_roi(prob_map: VolumeBundle, roi: RoiAnnotation, t: float) -> RoiDecision:
    """Call an ROI positive when its positive-voxel fraction exceeds ``t``."""
    frac = positive_fraction(prob_map, roi)
    return RoiDecision(roi.roi_id, frac, frac > check_threshold(t), t)


def roi_confusion(decisions: Sequence[RoiDecision], pathologies: Mapping[str, Optional[int]],
                  rule: SignificanceRule) -> ConfusionCounts:
    """+TP/+FP/+TN/+FN of ML decisions on radiologist-positive ROIs."""
    calls, truths = [], []
    for d in decisions:
        grade = pathologies.get(d.roi_id)
        if grade is None:
            raise MissingLabelError(f"ROI {d.roi_id!r} has no pathology")
        calls.append(d.decision)
        truths.append(is_significant(grade, rule))
    return tabulate(calls, truths, "MLonPositives", "ROI")


def combine_with_radiologist(rad: ConfusionCounts, ml_on_pos: ConfusionCounts) -> ConfusionCounts:
    if ml_on_pos.tp + ml_on_pos.fn != rad.tp or ml_on_pos.fp + ml_on_pos.tn != rad.fp:
        raise IncompatibleCountsError(
            f"ML must classify exactly the radiologist positives: radiologist (tp={rad.tp}, fp={rad.fp}) "
            f"vs ML on positives (tp+fn={ml_on_pos.tp + ml_on_pos.fn}, fp+tn={ml_on_pos.fp + ml_on_pos.tn})"
        )
    return ConfusionCounts(
        tp=ml_on_pos.tp,
        fp=ml_on_pos.fp,
        tn=rad.tn + ml_on_pos.tn,
        fn=rad.fn + ml_on_pos.fn,
        source="RadPlusML",
        level=rad.level,
    )


def split_combined(rad: ConfusionCounts, combined: ConfusionCounts) -> ConfusionCounts:
    """Recover the ML-on-positives counts from radiologist and fused counts."""
    return ConfusionCounts(combined.tp, combined.fp, combined.tn - rad.tn, combined.fn - rad.fn,
                           "MLonPositives", rad.level)


def transfer_to_external_cohort(sen_plus: float, spc_plus: float, rad: ConfusionCounts) -> ConfusionCounts:
    """Expected fused counts when ML rates measured elsewhere gate ``rad``.

    Counts are real-valued expectations; nothing is rounded.
    """
    for name, rate in (("sen_plus", sen_plus), ("spc_plus", spc_plus)):
        if not (0.0 <= rate <= 1.0):
            raise DomainError(f"{name} must be in [0, 1], got {rate}")
    return ConfusionCounts(
        tp=rad.tp * sen_plus,
        fp=rad.fp * (1.0 - spc_plus),
        tn=rad.tn + rad.fp * spc_plus,
        fn=rad.fn + rad.tp * (1.0 - sen_plus),
        source="RadPlusML",
        level=rad.level,
    )


# ---------------------------------------------------------------------------
# zones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BarzellZoneMap:
    zone_map: np.ndarray  # int32, 0 outside the gland
    n_zones: int
    splits: tuple[int, int, int] = DEFAULT_SPLITS

    def zone_sizes(self) -> np.ndarray:
        return np.bincount(self.zone_map.ravel(order="F"), minlength=self.n_zones + 1)


def build_zone_map(gland_mask: np.ndarray, splits=DEFAULT_SPLITS) -> BarzellZoneMap:
    """Partition the gland bounding box into equal slabs along each axis.

    Zone ids run lateral-fastest: ``1 + lat + n_lat * (ap + n_ap * cc)``.
    """
    gland = np.asarray(gland_mask) > 0
    splits = tuple(int(s) for s in splits)
    if len(splits) != 3 or min(splits) < 1:
        raise ValueError(f"splits must be three positive ints, got {splits}")
    nz = np.nonzero(gland)
    if nz[0].size == 0:
        raise DegenerateInputError("gland mask is empty")
    parts = []
    for axis, (coords, n) in enumerate(zip(nz, splits)):
        lo, hi = int(coords.min()), int(coords.max())
        extent = hi - lo + 1
        if extent < n:
            raise DegenerateInputError(
                f"gland spans {extent} voxels along axis {axis}, fewer than {n} splits"
            )
        idx = np.arange(gland.shape[axis])
        part = np.clip((idx - lo) * n // extent, 0, n - 1)
        shape = [1, 1, 1]
        shape[axis] = -1
        parts.append(part.reshape(shape))
    lat, ap, cc = parts
    zones = 1 + lat + splits[0] * (ap + splits[1] * cc)
    zone_map = np.where(gland, zones, 0).astype(np.int32)
    return BarzellZoneMap(zone_map, splits[0] * splits[1] * splits[2], splits)


def lesion_to_zones(roi: RoiAnnotation, zones: BarzellZoneMap, overlap_min: float = 0.05) -> set[int]:
    """Zones covered by more than ``overlap_min`` of either the zone or the ROI."""
    flat = zones.zone_map.ravel(order="F")
    offsets = roi.offsets()
    hit = np.bincount(flat[offsets], minlength=zones.n_zones + 1)
    sizes = zones.zone_sizes()
    out = set()
    for z in range(1, zones.n_zones + 1):
        if hit[z] == 0:
            continue
        if hit[z] / sizes[z] > overlap_min or hit[z] / offsets.size > overlap_min:
            out.add(z)
    return out


def zone_confusion(records: Sequence[PatientRecord], prob_maps: Mapping[str, VolumeBundle],
                   zone_maps: Mapping[str, BarzellZoneMap], zone_truth: Mapping[str, Mapping[int, bool]],
                   rule: SignificanceRule, cutoff: int, t: float, overlap_min: float = 0.05):
    """Radiologist and fused zone-level counts.

    A zone is radiologist-positive when any radiologist-positive ROI maps to
    it, and ML-positive when any of those ROIs is ML-positive.  ``rule`` is
    applied when ``zone_truth`` was derived; it is accepted here for symmetry.
    """
    check_threshold(t)
    missing = [r.patient_id for r in records if r.patient_id not in zone_truth]
    if missing:
        raise MissingLabelError(f"no zone truth for patients: {', '.join(missing)}")
    rad_calls, ml_calls, truths = [], [], []
    for record in records:
        zmap = zone_maps[record.patient_id]
        truth = zone_truth[record.patient_id]
        rad_zones, ml_zones = set(), set()
        plus = record.positive_rois(cutoff)
        if plus:
            positive = positive_voxels(prob_maps[record.patient_id])
        for roi in plus:
            covered = lesion_to_zones(roi, zmap, overlap_min)
            rad_zones |= covered
            if positive_fraction(prob_maps[record.patient_id], roi, positive) > t:
                ml_zones |= covered
        for z in range(1, zmap.n_zones + 1):
            rad_calls.append(z in rad_zones)
            ml_calls.append(z in ml_zones)
            truths.append(bool(truth[z]))
    return _fuse_calls(rad_calls, ml_calls, truths, "Zone")


def _fuse_calls(rad_calls, ml_calls, truths, level):
    rad = tabulate(rad_calls, truths, "Rad", level)
    on_pos = [(m, y) for r, m, y in zip(rad_calls, ml_calls, truths) if r]
    ml = tabulate([m for m, _ in on_pos], [y for _, y in on_pos], "MLonPositives", level)
    return rad, combine_with_radiologist(rad, ml)


def patient_confusion(records: Sequence[PatientRecord], prob_maps: Mapping[str, VolumeBundle],
                      rule: SignificanceRule, cutoff: int, t: float):
    """Radiologist and fused patient-level counts; patients without cores are skipped."""
    check_threshold(t)
    rad_calls, ml_calls, truths = [], [], []
    for record in records:
        if not record.cores:
            continue
        truths.append(patient_truth_label(record, rule))
        plus = record.positive_rois(cutoff)
        rad_calls.append(bool(plus))
        ml = False
        if plus:
            positive = positive_voxels(prob_maps[record.patient_id])
            ml = any(positive_fraction(prob_maps[record.patient_id], roi, positive) > t for roi in plus)
        ml_calls.append(ml)
    return _fuse_calls(rad_calls, ml_calls, truths, "Patient")


def roi_level(records: Sequence[PatientRecord], prob_maps: Mapping[str, VolumeBundle],
              rule: SignificanceRule, cutoff: int, t: float):
    """ML decisions on every radiologist-positive ROI with their counts.

    At ROI level every case is radiologist-positive, so the radiologist
    counts are just significant vs benign ROIs.
    """
    check_threshold(t)
    decisions, pathologies = [], {}
    for record in records:
        plus = record.positive_rois(cutoff)
        if not plus:
            continue
        positive = positive_voxels(prob_maps[record.patient_id])
        for roi in plus:
            key = f"{record.patient_id}/{roi.roi_id}"
            frac = positive_fraction(prob_maps[record.patient_id], roi, positive)
            decisions.append(RoiDecision(key, frac, frac > t, t))
            pathologies[key] = roi.pathology
    ml = roi_confusion(decisions, pathologies, rule)
    rad = ConfusionCounts(ml.tp + ml.fn, ml.fp + ml.tn, 0, 0, "Rad", "ROI")
    return decisions, rad, combine_with_radiologist(rad, ml)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def confusion_row(counts: ConfusionCounts, threshold) -> dict:
    from .metrics import rates

    sen, spc = rates(counts)
    return {
        "level": counts.level, "source": counts.source, "threshold": threshold,
        "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn,
        "sen": sen, "spc": spc,
    }


def write_confusion_csv(rows: Iterable[tuple[ConfusionCounts, object]], path) -> Path:
    """Write ``(counts, threshold)`` pairs with the fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for counts, threshold in rows:
            row = confusion_row(counts, threshold)
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return path


def _num(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_confusion_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        rows = []
        for raw in reader:
            if not raw:
                break
            row = dict(zip(CSV_COLUMNS, raw))
            for key in CSV_COLUMNS[2:]:
                row[key] = _num(row[key])
            rows.append(row)
    return rows
