"""Glue between the modules: train, infer, evaluate all levels, compare."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .classifier import (
    TrainConfig,
    VoxelClassifierModel,
    predict_probability_map,
    train,
    training_set,
    with_roi_mask,
)
from .cohort import (
    SCALE_RANGES,
    PatientRecord,
    SignificanceRule,
    patient_truth_label,
    radiologist_patient_call,
)
from .errors import ExtrapolationError
from .fusion import (
    DEFAULT_SPLITS,
    BarzellZoneMap,
    ConfusionCounts,
    build_zone_map,
    patient_confusion,
    roi_level,
    split_combined,
    tabulate,
    zone_confusion,
)
from .metrics import SweepCurve, interpolate_at_sensitivity, sweep
from .phantom import PhantomTruth, zone_truth_from_labels
from .volume import VolumeBundle

DEFAULT_THRESHOLDS = (0.0, 0.01, 0.1, 0.3, 0.5, 0.9)


def fit_model(records: Sequence[PatientRecord], bundles: Mapping[str, VolumeBundle], layout: str,
              rule: SignificanceRule, cutoff: int, config: TrainConfig = TrainConfig()) -> VoxelClassifierModel:
    X, y = training_set(records, bundles, layout, rule, cutoff, config)
    return train(X, y, config, layout=layout)


def infer(model: VoxelClassifierModel, records: Sequence[PatientRecord],
          bundles: Mapping[str, VolumeBundle], cutoff: int) -> dict[str, VolumeBundle]:
    return {
        r.patient_id: predict_probability_map(model, with_roi_mask(bundles[r.patient_id], r, cutoff))
        for r in records
    }


def zone_inputs(records: Sequence[PatientRecord], bundles: Mapping[str, VolumeBundle], truth: PhantomTruth,
                rule: SignificanceRule, splits=DEFAULT_SPLITS):
    zone_maps: dict[str, BarzellZoneMap] = {}
    zone_truth: dict[str, dict[int, bool]] = {}
    for r in records:
        zmap = build_zone_map(bundles[r.patient_id]["gland_mask"], splits)
        zone_maps[r.patient_id] = zmap
        zone_truth[r.patient_id] = zone_truth_from_labels(
            truth[r.patient_id].labels, zmap.zone_map, rule.min_grade_group)
    return zone_maps, zone_truth


@dataclass
class LevelResult:
    level: str
    threshold: float
    rad: ConfusionCounts
    ml: ConfusionCounts
    combined: ConfusionCounts


def evaluate_levels(records, prob_maps, rule, cutoff, thresholds, zone_maps=None, zone_truth=None,
                    overlap_min: float = 0.05) -> list[LevelResult]:
    """Radiologist, ML-on-positives and fused counts per level and threshold."""
    out = []
    for t in thresholds:
        _, rad, comb = roi_level(records, prob_maps, rule, cutoff, t)
        out.append(LevelResult("ROI", t, rad, split_combined(rad, comb), comb))
        if zone_maps is not None:
            rad, comb = zone_confusion(records, prob_maps, zone_maps, zone_truth, rule, cutoff, t, overlap_min)
            out.append(LevelResult("Zone", t, rad, split_combined(rad, comb), comb))
        rad, comb = patient_confusion(records, prob_maps, rule, cutoff, t)
        out.append(LevelResult("Patient", t, rad, split_combined(rad, comb), comb))
    return out


def radiologist_curve(records, rule, scale: str = "UCLA") -> SweepCurve:
    """Patient-level radiologist operating points over every score cutoff."""
    lo, hi = SCALE_RANGES[scale]
    scored = [r for r in records if r.cores]

    def evaluate(cutoff):
        return tabulate(
            [radiologist_patient_call(r, cutoff, scale) for r in scored],
            [patient_truth_label(r, rule) for r in scored],
            "Rad", "Patient",
        )

    return sweep(evaluate, range(lo, hi + 1), unit_interval=False)


def fused_curve(records, prob_maps, rule, cutoff, thresholds=DEFAULT_THRESHOLDS) -> SweepCurve:
    return sweep(lambda t: patient_confusion(records, prob_maps, rule, cutoff, t)[1], thresholds)


@dataclass
class ControlledComparison:
    target_sen: float
    rad_spc: float
    fused_spc: float
    cutoff: int
    rad_curve: SweepCurve
    fused_curve: SweepCurve

    @property
    def gain(self) -> float:
        return self.fused_spc - self.rad_spc


def controlled_comparison(records, prob_maps, rule, target_sen: float = 0.8, cutoff: int = 3,
                          thresholds=DEFAULT_THRESHOLDS, scale: str = "UCLA") -> ControlledComparison:
    """Patient-level specificity of radiologist vs fused reading at a fixed sensitivity.

    The radiologist curve spans every score cutoff.  The fused curve sweeps
    the ML threshold over the ROIs positive at ``cutoff`` (the definition the
    model was trained with); lower cutoffs are tried only when that sweep
    cannot reach ``target_sen``.
    """
    rad_curve = radiologist_curve(records, rule, scale)
    rad_spc = interpolate_at_sensitivity(rad_curve, target_sen)
    lo, _ = SCALE_RANGES[scale]
    for c in range(cutoff, lo - 1, -1):
        curve = fused_curve(records, prob_maps, rule, c, thresholds)
        try:
            spc = interpolate_at_sensitivity(curve, target_sen)
        except ExtrapolationError:
            continue
        return ControlledComparison(target_sen, rad_spc, spc, c, rad_curve, curve)
    raise ExtrapolationError(f"no cutoff <= {cutoff} lets the fused sweep reach sensitivity {target_sen}")
