"""Sensitivity/specificity, threshold sweeps, and controlled-sensitivity reads."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .errors import ExtrapolationError
from .fusion import CSV_COLUMNS, ConfusionCounts, _fmt, _num, confusion_row

CONTROLLED_COLUMNS = ("level", "source", "layout", "target_sen", "spc", "spc_pct", "status")
CONTROLLED_MARKER = "# controlled_sen"


def rates(c: ConfusionCounts) -> tuple[Optional[float], Optional[float]]:
    """(sensitivity, specificity); ``None`` marks a zero denominator."""
    sen = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None
    spc = c.tn / (c.tn + c.fp) if c.tn + c.fp > 0 else None
    return sen, spc


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    counts: Optional[ConfusionCounts] = None


@dataclass
class SweepCurve:
    points: list[OperatingPoint] = field(default_factory=list)
    level: str = ""
    source: str = ""
    layout: str = ""
    cohort: str = ""

    def __len__(self):
        return len(self.points)


def _sort_key(p: OperatingPoint):
    undefined = p.sensitivity is None
    return (undefined, 0.0 if undefined else -p.sensitivity, p.threshold)


def sweep(evaluator: Callable[[float], ConfusionCounts], thresholds: Iterable[float], *,
          unit_interval: bool = True, layout: str = "", cohort: str = "") -> SweepCurve:
    """Evaluate every threshold and sort by descending sensitivity.

    Set ``unit_interval=False`` to sweep integer radiologist cutoffs.
    """
    thresholds = list(thresholds)
    if len(set(thresholds)) != len(thresholds):
        raise ValueError(f"thresholds must be distinct: {thresholds}")
    if unit_interval and any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValueError(f"thresholds must lie in [0, 1]: {thresholds}")
    points = []
    for t in thresholds:
        counts = evaluator(t)
        sen, spc = rates(counts)
        points.append(OperatingPoint(t, sen, spc, counts))
    points.sort(key=_sort_key)
    level = points[0].counts.level if points else ""
    source = points[0].counts.source if points else ""
    return SweepCurve(points, level, source, layout, cohort)


def interpolate_at_sensitivity(curve: SweepCurve | Sequence[OperatingPoint], target_sen: float) -> float:
    """Specificity at ``target_sen`` by linear interpolation between the
    closest operating points on either side.  Never extrapolates."""
    points = curve.points if isinstance(curve, SweepCurve) else list(curve)
    usable = [p for p in points if p.sensitivity is not None and p.specificity is not None]
    if not usable:
        raise ExtrapolationError("curve has no points with defined rates")
    sens = [p.sensitivity for p in usable]
    if not min(sens) <= target_sen <= max(sens):
        raise ExtrapolationError(
            f"target sensitivity {target_sen} outside curve range [{min(sens)}, {max(sens)}]"
        )
    exact = [p.specificity for p in usable if p.sensitivity == target_sen]
    if exact:
        return max(exact)
    sen_hi = min(s for s in sens if s > target_sen)
    sen_lo = max(s for s in sens if s < target_sen)
    # among points sharing a sensitivity, the best specificity dominates
    hi = max((p for p in usable if p.sensitivity == sen_hi), key=lambda p: p.specificity)
    lo = max((p for p in usable if p.sensitivity == sen_lo), key=lambda p: p.specificity)
    frac = (target_sen - lo.sensitivity) / (hi.sensitivity - lo.sensitivity)
    return lo.specificity + frac * (hi.specificity - lo.specificity)


def report(curves: Sequence[SweepCurve], path, controlled_sen: Sequence[float] = ()) -> Path:
    """Write every curve point, then one controlled-sensitivity row per
    (curve, target).  Targets a curve cannot reach are marked, not guessed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for curve in curves:
            for p in curve.points:
                if p.counts is None:
                    row = {"level": curve.level, "source": curve.source, "threshold": p.threshold,
                           "tp": None, "fp": None, "tn": None, "fn": None,
                           "sen": p.sensitivity, "spc": p.specificity}
                else:
                    row = confusion_row(p.counts, p.threshold)
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
        if controlled_sen and curves:
            writer.writerow([])
            writer.writerow([CONTROLLED_MARKER])
            writer.writerow(CONTROLLED_COLUMNS)
            for curve in curves:
                for target in controlled_sen:
                    try:
                        spc = interpolate_at_sensitivity(curve, target)
                        out = [_fmt(spc), f"{100 * spc:.4f}", "ok"]
                    except ExtrapolationError:
                        out = ["", "", "out_of_range"]
                    writer.writerow([curve.level, curve.source, curve.layout, _fmt(float(target)), *out])
    return path


def read_report(path) -> tuple[list[dict], list[dict]]:
    """Parse a report back into (curve rows, controlled-sensitivity rows)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(csv.reader(fh))
    if not lines:
        return [], []
    if tuple(lines[0]) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {lines[0]}")
    rows, controlled = [], []
    i = 1
    while i < len(lines) and lines[i]:
        row = dict(zip(CSV_COLUMNS, lines[i]))
        for key in CSV_COLUMNS[2:]:
            row[key] = _num(row[key])
        rows.append(row)
        i += 1
    while i < len(lines) and lines[i] != [CONTROLLED_MARKER]:
        i += 1
    for raw in lines[i + 2:]:
        row = dict(zip(CONTROLLED_COLUMNS, raw))
        row["target_sen"] = _num(row["target_sen"])
        row["spc"] = _num(row["spc"])
        row["spc_pct"] = _num(row["spc_pct"])
        controlled.append(row)
    return rows, controlled


def curves_from_rows(rows: Iterable[dict], layout: str = "") -> list[SweepCurve]:
    """Group CSV rows by (level, source) into curves, preserving first-seen order."""
    groups: dict[tuple[str, str], list[OperatingPoint]] = {}
    for row in rows:
        counts = None
        if row.get("tp") is not None:
            counts = ConfusionCounts(row["tp"], row["fp"], row["tn"], row["fn"], row["source"], row["level"])
        groups.setdefault((row["level"], row["source"]), []).append(
            OperatingPoint(row["threshold"], row["sen"], row["spc"], counts))
    curves = []
    for (level, source), points in groups.items():
        points.sort(key=_sort_key)
        curves.append(SweepCurve(points, level, source, layout))
    return curves
