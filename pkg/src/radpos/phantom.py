"""Seeded synthetic cohorts: glands, graded lesions, radiologist reads, biopsies.

Every patient draws from three independent RNG streams keyed on
``(seed, patient_index, stage)`` so the result of any stage does not depend
on how many patients were generated before it.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import (
    BiopsyCore,
    PatientRecord,
    RoiAnnotation,
    SuspicionScore,
    rle_encode,
    save_manifest,
    with_pathology,
)
from .errors import ConfigError
from .volume import VolumeBundle, bundle_checksums, save_bundle, voxel_index

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

_STAGE_IMAGE, _STAGE_READ, _STAGE_BIOPSY = 0, 1, 2
_CHANNELS = ("T2w", "ADC", "DWI_hb")


@dataclass
class PhantomConfig:
    seed: int = 0
    n_patients: int = 100
    shape: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    train_fraction: float = 0.5
    scale: str = "UCLA"
    # gland
    gland_radius_mm: tuple[float, float] = (9.0, 13.0)
    gland_contrast: dict = field(default_factory=lambda: {"T2w": 1.0, "ADC": 1.0, "DWI_hb": 0.5})
    # lesions; grade_probs over grade groups 1..5, contrast lists over groups 0..5
    lesion_poisson_mean: float = 1.5
    lesion_radius_mm: tuple[float, float] = (2.0, 4.0)
    lesion_grade_probs: tuple[float, ...] = (0.35, 0.30, 0.20, 0.10, 0.05)
    lesion_contrast: dict = field(default_factory=lambda: {
        "T2w": [0.0, -0.5, -0.9, -1.2, -1.5, -1.8],
        "ADC": [0.0, -0.6, -1.3, -1.6, -1.9, -2.2],
        "DWI_hb": [0.0, 0.6, 1.3, 1.6, 1.9, 2.2],
    })
    noise_sd: float = 1.0
    # radiologist; sensitivity over groups 1..5, score rows over groups 1..5 x scores
    detection_sensitivity: tuple[float, ...] = (0.6, 0.85, 0.9, 0.95, 0.95)
    false_roi_rate: float = 2.4
    score_probs: tuple[tuple[float, ...], ...] = (
        (0.00, 0.05, 0.30, 0.40, 0.20, 0.05),
        (0.00, 0.05, 0.22, 0.42, 0.23, 0.08),
        (0.00, 0.03, 0.17, 0.40, 0.28, 0.12),
        (0.00, 0.00, 0.10, 0.33, 0.35, 0.22),
        (0.00, 0.00, 0.10, 0.33, 0.35, 0.22),
    )
    false_score_probs: tuple[float, ...] = (0.00, 0.04, 0.14, 0.45, 0.29, 0.08)
    # biopsy
    targeted_cores_per_roi: int = 3
    systematic_cores: tuple[int, int] = (6, 12)
    misgrade_prob: float = 0.0

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.gland_radius_mm = tuple(float(r) for r in self.gland_radius_mm)
        self.lesion_radius_mm = tuple(float(r) for r in self.lesion_radius_mm)
        self.systematic_cores = tuple(int(n) for n in self.systematic_cores)
        self.lesion_grade_probs = tuple(float(p) for p in self.lesion_grade_probs)
        self.detection_sensitivity = tuple(float(p) for p in self.detection_sensitivity)
        self.score_probs = tuple(tuple(float(p) for p in row) for row in self.score_probs)
        self.false_score_probs = tuple(float(p) for p in self.false_score_probs)
        self.validate()

    def validate(self):
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigError(f"shape must have >= 8 voxels per axis, got {self.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigError("spacing_mm must be three positive reals")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in [0, 1]")
        lo, hi = self.systematic_cores
        if not 3 <= lo <= hi <= 30:
            raise ConfigError(f"systematic_cores must satisfy 3 <= min <= max <= 30, got {self.systematic_cores}")
        g_lo, g_hi = self.gland_radius_mm
        l_lo, l_hi = self.lesion_radius_mm
        if not 0 < g_lo <= g_hi or not 0 < l_lo <= l_hi:
            raise ConfigError("radius ranges must be positive and ordered")
        if l_hi >= g_lo:
            raise ConfigError(
                f"lesion radius up to {l_hi} mm does not fit inside glands as small as {g_lo} mm"
            )
        half_extent = min((n - 1) / 2 * s for n, s in zip(self.shape, self.spacing_mm))
        if g_hi + max(self.spacing_mm) > half_extent:
            raise ConfigError(f"gland radius up to {g_hi} mm does not fit in the volume")
        for name, probs, size in (
            ("lesion_grade_probs", self.lesion_grade_probs, 5),
            ("false_score_probs", self.false_score_probs, 6),
        ):
            _check_distribution(name, probs, size)
        if len(self.score_probs) != 5:
            raise ConfigError("score_probs needs one row per grade group 1..5")
        for g, row in enumerate(self.score_probs, start=1):
            _check_distribution(f"score_probs[{g}]", row, 6)
        if len(self.detection_sensitivity) != 5 or not all(0 <= p <= 1 for p in self.detection_sensitivity):
            raise ConfigError("detection_sensitivity needs five probabilities (grade groups 1..5)")
        for p_name in ("misgrade_prob",):
            if not 0 <= getattr(self, p_name) <= 1:
                raise ConfigError(f"{p_name} must be in [0, 1]")
        if self.false_roi_rate < 0 or self.lesion_poisson_mean < 0:
            raise ConfigError("Poisson rates must be non-negative")
        if self.targeted_cores_per_roi < 1:
            raise ConfigError("targeted_cores_per_roi must be >= 1")
        for ch in _CHANNELS:
            if len(self.lesion_contrast.get(ch, [])) != 6:
                raise ConfigError(f"lesion_contrast[{ch!r}] needs six offsets (grade groups 0..5)")
            if ch not in self.gland_contrast:
                raise ConfigError(f"gland_contrast missing {ch!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        flat = {}
        for key, value in data.items():
            if isinstance(value, dict) and key in _SECTIONS:
                for sub, v in value.items():
                    flat[_SECTIONS[key].get(sub, f"{key}_{sub}")] = v
            else:
                flat[key] = value
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(flat) - names)
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {', '.join(unknown)}")
        return cls(**flat)

    @classmethod
    def from_toml(cls, path) -> "PhantomConfig":
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


# TOML section -> {key: field}; keys not listed map to "<section>_<key>"
_SECTIONS = {
    "gland": {"radius_mm": "gland_radius_mm", "contrast": "gland_contrast"},
    "lesions": {
        "poisson_mean": "lesion_poisson_mean",
        "radius_mm": "lesion_radius_mm",
        "grade_probs": "lesion_grade_probs",
        "contrast": "lesion_contrast",
        "noise_sd": "noise_sd",
    },
    "radiologist": {
        "sensitivity": "detection_sensitivity",
        "false_roi_rate": "false_roi_rate",
        "score_probs": "score_probs",
        "false_score_probs": "false_score_probs",
    },
    "biopsy": {
        "targeted_per_roi": "targeted_cores_per_roi",
        "systematic_range": "systematic_cores",
        "misgrade_prob": "misgrade_prob",
    },
}


def _check_distribution(name, probs, size):
    if len(probs) != size:
        raise ConfigError(f"{name} needs {size} entries, got {len(probs)}")
    if any(p < 0 or p > 1 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
        raise ConfigError(f"{name} must be probabilities summing to 1")


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # voxel coordinates
    radius_mm: float
    grade: int


@dataclass
class PatientTruth:
    index: int
    gland_center: tuple[float, float, float]
    gland_radii_mm: tuple[float, float, float]
    lesions: list[Lesion]
    labels: np.ndarray  # uint8 grade group per voxel, 0 outside lesions

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "gland_center": list(self.gland_center),
            "gland_radii_mm": list(self.gland_radii_mm),
            "lesions": [
                {"center": list(l.center), "radius_mm": l.radius_mm, "grade": l.grade} for l in self.lesions
            ],
        }


@dataclass
class PhantomTruth:
    patients: dict[str, PatientTruth] = field(default_factory=dict)

    def __getitem__(self, patient_id: str) -> PatientTruth:
        return self.patients[patient_id]

    def __len__(self):
        return len(self.patients)


@dataclass
class PhantomCohort:
    config: PhantomConfig
    records: list[PatientRecord]
    truth: PhantomTruth
    bundles: dict[str, VolumeBundle]

    def record(self, patient_id: str) -> PatientRecord:
        for r in self.records:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)


def _rng(config: PhantomConfig, index: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, index, stage])


def _grid_mm(config: PhantomConfig):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(config.shape, config.spacing_mm)]


def ellipsoid_mask(config: PhantomConfig, center, radii_mm) -> np.ndarray:
    x, y, z = _grid_mm(config)
    c = [ci * s for ci, s in zip(center, config.spacing_mm)]
    return (((x - c[0]) / radii_mm[0])[:, None, None] ** 2
            + ((y - c[1]) / radii_mm[1])[None, :, None] ** 2
            + ((z - c[2]) / radii_mm[2])[None, None, :] ** 2) <= 1.0


def sphere_mask(config: PhantomConfig, center, radius_mm) -> np.ndarray:
    return ellipsoid_mask(config, center, (radius_mm,) * 3)


def _point_in_ellipsoid(rng, center, radii_mm, spacing) -> tuple[float, float, float]:
    while True:
        u = rng.uniform(-1.0, 1.0, size=3)
        if float(u @ u) <= 1.0:
            return tuple(float(c + ui * r / s) for c, ui, r, s in zip(center, u, radii_mm, spacing))


def _draw_patient(config: PhantomConfig, index: int):
    rng = _rng(config, index, _STAGE_IMAGE)
    center = tuple(float((n - 1) / 2 + rng.uniform(-1.0, 1.0)) for n in config.shape)
    radii = tuple(float(r) for r in rng.uniform(*config.gland_radius_mm, size=3))
    gland = ellipsoid_mask(config, center, radii)

    lesions = []
    for _ in range(int(rng.poisson(config.lesion_poisson_mean))):
        radius = float(rng.uniform(*config.lesion_radius_mm))
        inner = tuple(r - radius for r in radii)
        lc = _point_in_ellipsoid(rng, center, inner, config.spacing_mm)
        grade = int(rng.choice(np.arange(1, 6), p=config.lesion_grade_probs))
        lesions.append(Lesion(lc, radius, grade))

    labels = np.zeros(config.shape, dtype=np.uint8)
    for lesion in lesions:
        m = sphere_mask(config, lesion.center, lesion.radius_mm)
        labels[m] = np.maximum(labels[m], lesion.grade)

    channels = {}
    for ch in _CHANNELS:
        contrast = np.asarray(config.lesion_contrast[ch], dtype=np.float64)
        img = config.gland_contrast[ch] * gland + contrast[labels]
        img = img + config.noise_sd * rng.standard_normal(config.shape)
        channels[ch] = img
    channels["gland_mask"] = gland
    bundle = VolumeBundle(config.shape, config.spacing_mm, channels)
    truth = PatientTruth(index, center, radii, lesions, labels)
    return bundle, truth


def patient_id(index: int) -> str:
    return f"P{index:04d}"


def generate_cohort(config: PhantomConfig) -> PhantomCohort:
    """Draw glands, lesions and image channels; ROIs and cores are left empty."""
    n_train = int(round(config.n_patients * config.train_fraction))
    records, bundles, truth = [], {}, PhantomTruth()
    for index in range(config.n_patients):
        pid = patient_id(index)
        bundle, ptruth = _draw_patient(config, index)
        split = "train" if index < n_train else "test"
        records.append(PatientRecord(pid, f"bundles/{pid}", split=split))
        bundles[pid] = bundle
        truth.patients[pid] = ptruth
    return PhantomCohort(config, records, truth, bundles)


def _roi_from_sphere(config, center, radius_mm) -> np.ndarray:
    return ndimage.binary_dilation(sphere_mask(config, center, radius_mm))


def simulate_patient_reads(ptruth: PatientTruth, config: PhantomConfig) -> list[RoiAnnotation]:
    rng = _rng(config, ptruth.index, _STAGE_READ)
    scores = np.arange(6)
    rois = []
    for lesion in ptruth.lesions:
        if rng.random() < config.detection_sensitivity[lesion.grade - 1]:
            mask = _roi_from_sphere(config, lesion.center, lesion.radius_mm)
            score = int(rng.choice(scores, p=config.score_probs[lesion.grade - 1]))
            rois.append((mask, score))
    gland = ellipsoid_mask(config, ptruth.gland_center, ptruth.gland_radii_mm)
    cancer = ptruth.labels > 0
    for _ in range(int(rng.poisson(config.false_roi_rate))):
        radius = float(rng.uniform(*config.lesion_radius_mm))
        inner = tuple(r - radius for r in ptruth.gland_radii_mm)
        score = int(rng.choice(scores, p=config.false_score_probs))
        for _attempt in range(20):
            center = _point_in_ellipsoid(rng, ptruth.gland_center, inner, config.spacing_mm)
            mask = _roi_from_sphere(config, center, radius) & gland
            if mask.any() and not (mask & cancer).any():
                rois.append((mask, score))
                break
    return [
        RoiAnnotation(f"R{n}", rle_encode(mask), SuspicionScore(config.scale, _to_scale(score, config.scale)))
        for n, (mask, score) in enumerate(rois, start=1)
    ]


def _to_scale(score: int, scale: str) -> int:
    return max(score, 1) if scale == "PIRADS" else score


def simulate_radiologist(truth: PhantomTruth, config: PhantomConfig) -> dict[str, list[RoiAnnotation]]:
    """Per-patient radiologist ROIs: detected lesions plus false ROIs in benign tissue."""
    return {pid: simulate_patient_reads(pt, config) for pid, pt in truth.patients.items()}


def _misgrade(rng, grade: int, p: float) -> int:
    if p > 0 and rng.random() < p:
        return int(np.clip(grade + rng.choice((-1, 1)), 0, 5))
    return grade


def simulate_biopsy(record: PatientRecord, ptruth: PatientTruth, config: PhantomConfig) -> list[BiopsyCore]:
    """Targeted cores inside every ROI plus systematic cores elsewhere in the gland."""
    rng = _rng(config, ptruth.index, _STAGE_BIOPSY)
    shape = config.shape
    flat_labels = ptruth.labels.ravel(order="F")
    cores = []
    covered = np.zeros(int(np.prod(shape)), dtype=bool)
    for roi in record.rois:
        offsets = roi.offsets()
        covered[offsets] = True
        k = min(config.targeted_cores_per_roi, offsets.size)
        picks = rng.choice(offsets, size=k, replace=False)
        for n, off in enumerate(picks, start=1):
            grade = _misgrade(rng, int(flat_labels[off]), config.misgrade_prob)
            ijk = tuple(int(c) for c in voxel_index(off, shape))
            cores.append(BiopsyCore(f"{roi.roi_id}-T{n}", "targeted", grade, ijk, roi.roi_id))

    gland = ellipsoid_mask(config, ptruth.gland_center, ptruth.gland_radii_mm).ravel(order="F")
    candidates = np.flatnonzero(gland & ~covered)
    if candidates.size == 0:
        log.warning("patient %s: no gland voxels outside ROIs, skipping systematic cores", record.patient_id)
        return cores
    lo, hi = config.systematic_cores
    count = min(int(rng.integers(lo, hi + 1)), candidates.size)
    picks = np.sort(rng.choice(candidates, size=count, replace=False))
    for n, off in enumerate(picks, start=1):
        grade = _misgrade(rng, int(flat_labels[off]), config.misgrade_prob)
        ijk = tuple(int(c) for c in voxel_index(off, shape))
        cores.append(BiopsyCore(f"S{n}", "systematic", grade, ijk))
    return cores


def apply_biopsy(record: PatientRecord, cores: list[BiopsyCore]) -> PatientRecord:
    """Attach cores and set every ROI's pathology to its worst targeted core."""
    worst: dict[str, int] = {}
    for core in cores:
        if core.kind == "targeted":
            worst[core.roi_id] = max(worst.get(core.roi_id, 0), core.grade)
    rois = tuple(with_pathology(r, worst.get(r.roi_id)) for r in record.rois)
    return dataclasses.replace(record, rois=rois, cores=tuple(cores))


def simulate_cohort(config: PhantomConfig) -> PhantomCohort:
    """Images, radiologist reads and biopsies for a full synthetic cohort."""
    cohort = generate_cohort(config)
    reads = simulate_radiologist(cohort.truth, config)
    records = []
    for record in cohort.records:
        record = dataclasses.replace(record, rois=tuple(reads[record.patient_id]))
        cores = simulate_biopsy(record, cohort.truth[record.patient_id], config)
        records.append(apply_biopsy(record, cores))
    cohort.records = records
    return cohort


def zone_truth_from_labels(labels: np.ndarray, zone_map: np.ndarray, min_grade_group: int) -> dict[int, bool]:
    """Zone -> whether any voxel of the zone holds significant cancer."""
    zones = zone_map.astype(np.int64)
    n = int(zones.max()) if zones.size else 0
    sig = np.bincount(zones.ravel(), weights=(labels >= min_grade_group).ravel(), minlength=n + 1)
    return {z: bool(sig[z] > 0) for z in range(1, n + 1)}


def write_cohort(cohort: PhantomCohort, out_dir) -> Path:
    """Write manifest, bundles, per-voxel truth, and a generator log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_entries = []
    for record in cohort.records:
        bpath = save_bundle(cohort.bundles[record.patient_id], out_dir / record.bundle)
        ptruth = cohort.truth[record.patient_id]
        tdir = out_dir / "truth"
        tdir.mkdir(exist_ok=True)
        (tdir / f"{record.patient_id}.raw").write_bytes(ptruth.labels.astype(np.uint8).tobytes(order="F"))
        log_entries.append({
            "patient_id": record.patient_id,
            "n_lesions": len(ptruth.lesions),
            "n_rois": len(record.rois),
            "n_targeted_cores": sum(c.kind == "targeted" for c in record.cores),
            "n_systematic_cores": sum(c.kind == "systematic" for c in record.cores),
            "checksums": bundle_checksums(bpath),
        })
    truth_doc = {
        "shape": list(cohort.config.shape),
        "patients": {pid: t.to_dict() for pid, t in cohort.truth.patients.items()},
    }
    (out_dir / "truth.json").write_text(json.dumps(truth_doc, indent=1) + "\n", encoding="utf-8")
    (out_dir / "phantom_config.json").write_text(
        json.dumps(cohort.config.to_dict(), indent=1) + "\n", encoding="utf-8")
    (out_dir / "generator_log.json").write_text(json.dumps(log_entries, indent=1) + "\n", encoding="utf-8")
    save_manifest(cohort.records, out_dir / "cohort.json", cohort.config.scale)
    return out_dir / "cohort.json"


def load_truth_labels(cohort_dir, patient_id: str, shape) -> np.ndarray:
    data = (Path(cohort_dir) / "truth" / f"{patient_id}.raw").read_bytes()
    return np.frombuffer(data, dtype=np.uint8).reshape(tuple(shape), order="F")


def load_truth(cohort_dir) -> PhantomTruth:
    cohort_dir = Path(cohort_dir)
    doc = json.loads((cohort_dir / "truth.json").read_text(encoding="utf-8"))
    shape = tuple(doc["shape"])
    truth = PhantomTruth()
    for pid, t in doc["patients"].items():
        lesions = [Lesion(tuple(l["center"]), l["radius_mm"], l["grade"]) for l in t["lesions"]]
        truth.patients[pid] = PatientTruth(
            t["index"], tuple(t["gland_center"]), tuple(t["gland_radii_mm"]), lesions,
            load_truth_labels(cohort_dir, pid, shape),
        )
    return truth
