"""Reference voxel classifier: positive / negative / background.

A multinomial logistic model on local intensity features.  It takes the same
inputs as the deep network it stands in for (image channels plus the binary
radiologist-positive mask) and produces the same three probability channels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .cohort import PatientRecord, SignificanceRule, is_significant
from .errors import DegenerateTrainingError, LayoutError, MissingLabelError
from .volume import PROB_CHANNELS, VolumeBundle

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, BACKGROUND = 0, 1, 2
CLASS_NAMES = ("positive", "negative", "background")
LAYOUTS = {
    "t2": ("T2w",),
    "bpmr": ("T2w", "DWI_hb", "ADC"),
}
MODEL_FORMAT = "radpos-voxel-classifier"
MODEL_VERSION = 1


def layout_channels(layout: str) -> tuple[str, ...]:
    try:
        return LAYOUTS[layout]
    except KeyError:
        raise LayoutError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}") from None


def feature_names(layout: str) -> list[str]:
    names = []
    for ch in layout_channels(layout):
        names += [ch, f"{ch}_local_mean", f"{ch}_local_sd"]
    return names + ["in_gland", "in_roi"]


def roi_mask(record: PatientRecord, shape, cutoff: int) -> np.ndarray:
    """Binary union of the patient's radiologist-positive ROIs."""
    mask = np.zeros(int(np.prod(shape)), dtype=bool)
    for roi in record.positive_rois(cutoff):
        mask[roi.offsets()] = True
    return mask.reshape(tuple(shape), order="F")


def with_roi_mask(bundle: VolumeBundle, record: PatientRecord, cutoff: int) -> VolumeBundle:
    return bundle.with_channels(roi_mask=roi_mask(record, bundle.shape, cutoff))


def build_training_labels(record: PatientRecord, rule: SignificanceRule, cutoff: int, shape) -> np.ndarray:
    """Per-voxel classes from radiologist-positive ROIs and their pathology.

    Positive overrides negative where ROIs overlap.
    """
    plus = record.positive_rois(cutoff)
    for roi in plus:
        if roi.pathology is None:
            raise MissingLabelError(
                f"patient {record.patient_id!r}: ROI {roi.roi_id!r} (score {roi.score.value}) has no pathology"
            )
    labels = np.full(int(np.prod(shape)), BACKGROUND, dtype=np.int8)
    for roi in plus:
        if not is_significant(roi.pathology, rule):
            labels[roi.offsets()] = NEGATIVE
    for roi in plus:
        if is_significant(roi.pathology, rule):
            labels[roi.offsets()] = POSITIVE
    return labels.reshape(tuple(shape), order="F")


def local_stats(image: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population sd over a (2r+1)^3 window with edge clamping."""
    x = np.asarray(image, dtype=np.float64)
    if radius == 0:
        return x.copy(), np.zeros_like(x)
    shift = np.median(x)  # keeps E[x^2] - E[x]^2 well conditioned; exact for constants
    x = x - shift
    size = 2 * radius + 1
    mean = ndimage.uniform_filter(x, size=size, mode="nearest")
    sq = ndimage.uniform_filter(x * x, size=size, mode="nearest")
    sd = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return mean + shift, sd


def extract_features(bundle: VolumeBundle, layout: str, radius: int = 1) -> np.ndarray:
    """Feature matrix with one row per voxel in storage order."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    required = layout_channels(layout) + ("roi_mask",)
    missing = [c for c in required if c not in bundle]
    if missing:
        raise LayoutError(f"layout {layout!r} needs channels {missing} missing from bundle")
    cols = []
    for ch in layout_channels(layout):
        img = bundle[ch].astype(np.float64)
        mean, sd = local_stats(img, radius)
        cols += [img, mean, sd]
    gland = bundle["gland_mask"] > 0 if "gland_mask" in bundle else np.zeros(bundle.shape, dtype=bool)
    cols += [gland.astype(np.float64), (bundle["roi_mask"] > 0).astype(np.float64)]
    return np.stack([c.ravel(order="F") for c in cols], axis=1)


@dataclass
class TrainConfig:
    l2: float = 1e-3
    epochs: int = 300
    step_size: float = 1.0
    class_weights: Optional[Sequence[float]] = None  # None: inverse class frequency
    seed: int = 0
    radius: int = 1
    background_per_patient: int = 2000


@dataclass
class VoxelClassifierModel:
    weights: np.ndarray  # (n_features + 1, 3); last row is the bias
    layout: str
    radius: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(feature_names(self.layout))
        if self.weights.shape != (n + 1, 3):
            raise LayoutError(f"weights shape {self.weights.shape} does not match layout {self.layout!r}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("model weights must be finite")
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)

    @classmethod
    def zeros(cls, layout: str, radius: int = 1) -> "VoxelClassifierModel":
        n = len(feature_names(layout))
        return cls(np.zeros((n + 1, 3)), layout, radius, np.zeros(n), np.ones(n))

    def design(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.feature_mean) / self.feature_scale
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.design(features) @ self.weights)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(weights, design, labels, sample_weight, l2):
    """Weighted mean cross-entropy plus ``l2/2 * ||W||^2`` (bias row excluded)."""
    logits = design @ weights
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    n = labels.shape[0]
    total_w = sample_weight.sum()
    nll = log_norm - z[np.arange(n), labels]
    reg_w = weights[:-1]
    loss = float(sample_weight @ nll) / total_w + 0.5 * l2 * float(np.sum(reg_w * reg_w))
    resid = np.exp(z - log_norm[:, None])
    resid[np.arange(n), labels] -= 1.0
    grad = design.T @ (resid * sample_weight[:, None]) / total_w
    grad[:-1] += l2 * reg_w
    return loss, grad


def _canonical_order(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    keys = np.column_stack([features, labels])
    return np.lexsort(keys.T[::-1])


def train(features: np.ndarray, labels: np.ndarray, config: TrainConfig = TrainConfig(),
          layout: str = "t2") -> VoxelClassifierModel:
    """Full-batch gradient descent from zero weights.

    Samples are put in a canonical order first, so the result does not depend
    on the order voxels were supplied in.  A step that would raise the loss is
    retried with half the step size.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_feat = len(feature_names(layout))
    if features.ndim != 2 or features.shape[1] != n_feat:
        raise LayoutError(f"layout {layout!r} expects {n_feat} features, got shape {features.shape}")
    counts = np.bincount(labels, minlength=3)
    if labels.size == 0 or np.any(counts[:3] == 0):
        raise DegenerateTrainingError(
            f"training set needs every class; counts (pos, neg, bg) = {tuple(int(c) for c in counts[:3])}"
        )
    order = _canonical_order(features, labels)
    features, labels = features[order], labels[order]

    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale == 0] = 1.0
    model = VoxelClassifierModel(np.zeros((n_feat + 1, 3)), layout, config.radius, mean, scale)
    if config.class_weights is None:
        class_w = labels.size / (3.0 * counts)
    else:
        class_w = np.asarray(config.class_weights, dtype=np.float64)
    sample_w = class_w[labels]
    design = model.design(features)

    w = model.weights
    step = config.step_size
    loss, grad = loss_and_grad(w, design, labels, sample_w, config.l2)
    history = [loss]
    for _ in range(config.epochs):
        while True:
            cand = w - step * grad
            cand_loss, cand_grad = loss_and_grad(cand, design, labels, sample_w, config.l2)
            if cand_loss <= loss or step < 1e-12:
                break
            step /= 2.0
        if cand_loss > loss:
            break
        w, loss, grad = cand, cand_loss, cand_grad
        history.append(loss)
    model.weights = w
    model.loss_history = history
    return model


def training_set(records: Sequence[PatientRecord], bundles: Mapping[str, VolumeBundle], layout: str,
                 rule: SignificanceRule, cutoff: int, config: TrainConfig = TrainConfig()):
    """Stack features/labels over patients, subsampling background voxels.

    Every ROI voxel is kept; up to ``background_per_patient`` background
    voxels are drawn per patient from a stream seeded by (seed, position).
    """
    xs, ys = [], []
    for pos, record in enumerate(records):
        bundle = with_roi_mask(bundles[record.patient_id], record, cutoff)
        feats = extract_features(bundle, layout, config.radius)
        labels = build_training_labels(record, rule, cutoff, bundle.shape).ravel(order="F")
        fg = np.flatnonzero(labels != BACKGROUND)
        bg = np.flatnonzero(labels == BACKGROUND)
        k = min(config.background_per_patient, bg.size)
        rng = np.random.default_rng([config.seed, pos])
        keep = np.sort(np.concatenate([fg, rng.choice(bg, size=k, replace=False)]))
        xs.append(feats[keep])
        ys.append(labels[keep])
    if not xs:
        return np.zeros((0, len(feature_names(layout)))), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64)


def predict_probability_map(model: VoxelClassifierModel, bundle: VolumeBundle) -> VolumeBundle:
    """Add prob_pos / prob_neg / prob_bg channels to ``bundle``."""
    feats = extract_features(bundle, model.layout, model.radius)
    proba = model.predict_proba(feats)
    channels = {
        name: proba[:, c].reshape(bundle.shape, order="F") for c, name in enumerate(PROB_CHANNELS)
    }
    return bundle.with_channels(**channels)


# ---------------------------------------------------------------------------
# model file: one JSON header line, then float64 LE weights in row-major order
# ---------------------------------------------------------------------------

def save_model(model: VoxelClassifierModel, path) -> Path:
    path = Path(path)
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layout": model.layout,
        "radius": model.radius,
        "feature_names": feature_names(model.layout),
        "feature_mean": model.feature_mean.tolist(),
        "feature_scale": model.feature_scale.tolist(),
        "rows": model.weights.shape[0],
        "cols": model.weights.shape[1],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    blob += model.weights.astype("<f8").tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


def load_model(path) -> VoxelClassifierModel:
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing model header")
    header = json.loads(head.decode("utf-8"))
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model format {header.get('format')!r} v{header.get('version')!r}")
    rows, cols = header["rows"], header["cols"]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {8 * rows * cols} weight bytes, found {len(body)}")
    weights = np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
    if header["feature_names"] != feature_names(header["layout"]):
        raise LayoutError(f"{path}: feature names do not match layout {header['layout']!r}")
    return VoxelClassifierModel(weights, header["layout"], header["radius"],
                                header["feature_mean"], header["feature_scale"])
