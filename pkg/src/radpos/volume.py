"""Multi-channel 3D volumes, their on-disk bundle format, and preprocessing.

Arrays are held with shape ``(nx, ny, nz)`` and indexed ``[i, j, k]``.  On
disk (and for run-length offsets) voxels are laid out with ``i`` fastest and
``k`` slowest, i.e. numpy Fortran order.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import BundleFormatError, DegenerateInputError, SizeMismatchError

IMAGE_CHANNELS = ("T2w", "ADC", "DWI_hb")
LABEL_CHANNELS = ("roi_mask", "gland_mask", "zone_map")
PROB_CHANNELS = ("prob_pos", "prob_neg", "prob_bg")
CHANNEL_NAMES = IMAGE_CHANNELS + LABEL_CHANNELS + PROB_CHANNELS

DEFAULT_TARGET_SHAPE = (64, 64, 64)
DEFAULT_MARGIN = 0.1
_PROB_SUM_TOL = 1e-5
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class VolumeBundle:
    """Named float32 grids sharing one shape and voxel spacing (mm)."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    channels: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) != 3 or any(n < 1 for n in shape):
            raise BundleFormatError("shape", f"expected three positive ints, got {self.shape!r}")
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise BundleFormatError("spacing_mm", f"expected three positive reals, got {self.spacing!r}")
        channels = {}
        for name, data in self.channels.items():
            if name not in CHANNEL_NAMES:
                raise BundleFormatError("channels", f"unknown channel {name!r}")
            arr = np.asarray(data, dtype=np.float32)
            if arr.shape != shape:
                if arr.size != math.prod(shape):
                    raise SizeMismatchError(
                        f"channel {name!r} has {arr.size} values, expected {math.prod(shape)}"
                    )
                raise BundleFormatError("channels", f"channel {name!r} has shape {arr.shape}, expected {shape}")
            if name in LABEL_CHANNELS and (np.any(arr < 0) or np.any(arr != np.floor(arr))):
                raise BundleFormatError("channels", f"label channel {name!r} must hold non-negative integers")
            arr = arr.copy()
            arr.setflags(write=False)
            channels[name] = arr
        if all(p in channels for p in PROB_CHANNELS):
            total = sum(channels[p].astype(np.float64) for p in PROB_CHANNELS)
            err = float(np.max(np.abs(total - 1.0))) if total.size else 0.0
            if err > _PROB_SUM_TOL:
                raise BundleFormatError("channels", f"probability channels do not sum to 1 (max error {err:.3g})")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "channels", channels)

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def __contains__(self, name: str) -> bool:
        return name in self.channels

    def with_channels(self, **updates: np.ndarray) -> "VolumeBundle":
        """Copy with channels added or replaced (new ones appended in order)."""
        channels = dict(self.channels)
        channels.update(updates)
        return VolumeBundle(self.shape, self.spacing, channels)

    def select(self, names: Iterable[str]) -> "VolumeBundle":
        return VolumeBundle(self.shape, self.spacing, {n: self.channels[n] for n in names})


def linear_index(ijk, shape) -> np.ndarray:
    """Storage-order offset(s) of voxel index triple(s)."""
    return np.ravel_multi_index(tuple(np.asarray(ijk).T), shape, order="F")


def voxel_index(offsets, shape) -> np.ndarray:
    return np.stack(np.unravel_index(np.asarray(offsets), shape, order="F"), axis=-1)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _meta_bytes(bundle: VolumeBundle) -> bytes:
    meta = {
        "shape": list(bundle.shape),
        "spacing_mm": list(bundle.spacing),
        "channels": bundle.names,
    }
    return (json.dumps(meta, indent=2) + "\n").encode("utf-8")


def save_bundle(bundle: VolumeBundle, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_bytes(_meta_bytes(bundle))
    for name, arr in bundle.channels.items():
        (path / f"{name}.raw").write_bytes(arr.astype(_DTYPE).tobytes(order="F"))
    return path


def load_bundle(path) -> VolumeBundle:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise BundleFormatError("meta.json", f"missing sidecar in {path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError("meta.json", f"unparseable: {exc}") from None
    if not isinstance(meta, dict):
        raise BundleFormatError("meta.json", "top level must be an object")
    for key in ("shape", "spacing_mm", "channels"):
        if key not in meta:
            raise BundleFormatError(key, "missing key")
    shape, spacing, names = meta["shape"], meta["spacing_mm"], meta["channels"]
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(n, int) and n > 0 for n in shape)):
        raise BundleFormatError("shape", f"expected three positive ints, got {shape!r}")
    if not (isinstance(spacing, list) and len(spacing) == 3
            and all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        raise BundleFormatError("spacing_mm", f"expected three positive reals, got {spacing!r}")
    if not (isinstance(names, list) and all(isinstance(n, str) for n in names)) or len(set(names)) != len(names):
        raise BundleFormatError("channels", f"expected a list of distinct names, got {names!r}")
    shape = tuple(shape)
    n_bytes = 4 * math.prod(shape)
    channels = {}
    for name in names:
        raw = path / f"{name}.raw"
        if not raw.is_file():
            raise BundleFormatError("channels", f"missing raw file for channel {name!r}")
        data = raw.read_bytes()
        if len(data) != n_bytes:
            raise SizeMismatchError(
                f"{raw}: {len(data)} bytes, expected {n_bytes} for shape {shape}"
            )
        channels[name] = np.frombuffer(data, dtype=_DTYPE).reshape(shape, order="F")
    return VolumeBundle(shape, tuple(spacing), channels)


def bundle_checksums(path) -> dict[str, str]:
    """sha256 of every file in a bundle directory, keyed by file name."""
    import hashlib

    path = Path(path)
    return {
        name: hashlib.sha256((path / name).read_bytes()).hexdigest()
        for name in sorted(os.listdir(path))
    }


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def center_crop(bundle: VolumeBundle, gland_mask: str = "gland_mask",
                margin: float = DEFAULT_MARGIN) -> VolumeBundle:
    """Crop every channel to the gland bounding box dilated by ``margin``.

    The dilation on each side is ``ceil(margin * extent)`` voxels, clamped to
    the input volume.
    """
    if gland_mask not in bundle:
        raise DegenerateInputError(f"no channel {gland_mask!r} to crop on")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    nz = np.nonzero(bundle[gland_mask])
    if nz[0].size == 0:
        raise DegenerateInputError(f"channel {gland_mask!r} is empty")
    slices = []
    for axis, coords in enumerate(nz):
        lo, hi = int(coords.min()), int(coords.max())
        pad = math.ceil(margin * (hi - lo + 1))
        slices.append(slice(max(lo - pad, 0), min(hi + pad, bundle.shape[axis] - 1) + 1))
    slices = tuple(slices)
    channels = {name: arr[slices] for name, arr in bundle.channels.items()}
    shape = tuple(s.stop - s.start for s in slices)
    return VolumeBundle(shape, bundle.spacing, channels)


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # voxel-centre alignment keeps the physical extent fixed
    if n_in == n_out:
        return np.arange(n_out, dtype=np.float64)
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(x, 0.0, n_in - 1)


def _linear_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    x = _source_coords(n_in, n_out)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    w = x - lo
    shape = [1, 1, 1]
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - w) + np.take(arr, hi, axis=axis) * w


def _nearest_axis(arr: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = arr.shape[axis]
    idx = np.floor(_source_coords(n_in, n_out) + 0.5).astype(np.intp)
    return np.take(arr, np.minimum(idx, n_in - 1), axis=axis)


def resample_trilinear(bundle: VolumeBundle, target_shape) -> VolumeBundle:
    """Resample to ``target_shape``; label channels use nearest neighbour.

    When all three probability channels are present they are renormalised
    per voxel afterwards.
    """
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or any(n < 2 for n in target_shape):
        raise ValueError(f"target_shape components must be >= 2, got {target_shape}")
    channels = {}
    for name, arr in bundle.channels.items():
        out = arr.astype(np.float64)
        step = _nearest_axis if name in LABEL_CHANNELS else _linear_axis
        for axis in range(3):
            out = step(out, axis, target_shape[axis])
        channels[name] = out
    if all(p in channels for p in PROB_CHANNELS):
        total = sum(channels[p] for p in PROB_CHANNELS)
        for p in PROB_CHANNELS:
            channels[p] = channels[p] / total
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(bundle.spacing, bundle.shape, target_shape))
    return VolumeBundle(target_shape, spacing, channels)


def normalize_intensity(bundle: VolumeBundle, channel: str, region: str = "gland_mask") -> VolumeBundle:
    """Z-score ``channel`` using statistics from the gland (or whole volume)."""
    if channel not in bundle:
        raise KeyError(f"no channel {channel!r}")
    data = bundle[channel].astype(np.float64)
    if region in bundle and np.any(bundle[region] > 0):
        values = data[bundle[region] > 0]
    else:
        values = data.ravel()
    mean = values.mean()
    sd = values.std()
    if not sd > 0:
        raise DegenerateInputError(f"channel {channel!r} has zero variance in the normalisation region")
    return bundle.with_channels(**{channel: (data - mean) / sd})


def preprocess(bundle: VolumeBundle, gland_mask: str = "gland_mask",
               target_shape=DEFAULT_TARGET_SHAPE, margin: float = DEFAULT_MARGIN) -> VolumeBundle:
    """Crop to the gland, z-score image channels, then resample."""
    out = center_crop(bundle, gland_mask, margin)
    for name in IMAGE_CHANNELS:
        if name in out:
            out = normalize_intensity(out, name, gland_mask)
    return resample_trilinear(out, target_shape)
