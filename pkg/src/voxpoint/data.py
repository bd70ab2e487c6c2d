"""Synthetic volumetric cohorts and dataset utilities.

A sample is a four-channel intensity volume plus a binary foreground mask
and a binary class label.  The generator grows a randomized superellipsoid
blob per sample and plants two independent, dial-controlled cues:

* a geometry cue: label-1 blobs get a stronger sinusoidal perturbation of
  the boundary radius, so their surfaces are spikier;
* an intensity cue: label-1 blobs get a brighter core region in channel 2.

At signal strength 0 the two class-conditional distributions coincide, so
no classifier can beat chance in expectation.  Both cues carry per-sample
noise, so neither is perfectly separable below strength 1.

Also here: volume file round-trip I/O, 4:1 train/test splitting and
cross-validation folds, the 24 exact axis-aligned volume rotations used
for minority-class augmentation, DICE overlap scoring, and bounding-box
crop extraction for the image branch.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeSample", "CohortSpec", "VolumeIOError", "VolumeFormatError",
    "TruncatedPayloadError", "generate_sample", "generate_cohort",
    "save_volume", "load_volume", "save_cohort", "load_cohort",
    "split_dataset", "cv_folds", "rotation_count", "rotation_inverse",
    "rotate_grid", "augment_rotate", "dice_score", "balance_minority",
    "is_augmented", "extract_crop", "CropGrid", "crop_grid",
]

N_CHANNELS = 4
CORE_CHANNEL = 2
_SIX = ndimage.generate_binary_structure(3, 1)


class VolumeIOError(ValueError):
    """Base class for volume file problems."""


class VolumeFormatError(VolumeIOError):
    """Header malformed or payload inconsistent with the header."""


class TruncatedPayloadError(VolumeIOError):
    """Payload file shorter than the header promises."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class VolumeSample:
    """Four intensity channels over a D,H,W grid plus mask and label."""

    sample_id: str
    channels: np.ndarray    # (4, D, H, W) float32
    mask: np.ndarray        # (D, H, W) bool
    label: int

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.channels.ndim != 4 or self.channels.shape[0] != N_CHANNELS:
            raise ValueError("channels must have shape (4, D, H, W)")
        if self.mask.shape != self.channels.shape[1:]:
            raise ValueError("mask dimensions must match the channels")
        if not np.isfinite(self.channels).all():
            raise ValueError("intensities must be finite")
        if not self.mask.any():
            raise ValueError("mask must have at least one foreground voxel")
        _, parts = ndimage.label(self.mask, structure=_SIX)
        if parts != 1:
            raise ValueError("mask foreground must be a single 6-connected "
                             f"component, found {parts}")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class CohortSpec:
    """Dials for a synthetic cohort."""

    n_samples: int
    dims: tuple[int, int, int]
    class_ratio: float          # fraction of label-1 samples
    geometry_signal: float      # 0..1 surface spikiness separation
    intensity_signal: float     # 0..1 core brightness separation
    seed: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise ValueError("dims must be three sizes, each >= 8")
        if not 0.0 < self.class_ratio < 1.0:
            raise ValueError("class_ratio must lie strictly in (0, 1)")
        for name in ("geometry_signal", "intensity_signal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

# Calibrated so that geometry_signal=1 separates surface-to-volume ratios
# by well over 20% while per-sample noise keeps the classes overlapping.
_AMP_BASE = 0.06
_AMP_GAIN = 0.38
_AMP_NOISE = 0.05
_CORE_GAIN = 1.8
_CORE_NOISE = 0.35
_BACKGROUND_NOISE = 0.35
_CHANNEL_LEVELS = (1.0, 1.3, 0.9, 1.1)
_CORE_EXTENT = 0.55


def _blob_mask(dims, amp: float, rng) -> np.ndarray:
    """Perturbed superellipsoid; returns its largest 6-connected part."""
    dims = np.asarray(dims)
    center = dims / 2.0 + rng.uniform(-0.05, 0.05, 3) * dims
    radii = rng.uniform(0.24, 0.34, 3) * dims
    power = rng.uniform(2.0, 3.5)
    f_theta = rng.integers(3, 7)
    f_phi = rng.integers(3, 7)
    phase_t = rng.uniform(0.0, 2.0 * np.pi)
    phase_p = rng.uniform(0.0, 2.0 * np.pi)

    grid = np.indices(dims) + 0.5
    delta = grid - center.reshape(3, 1, 1, 1)
    # homogeneous radial coordinate: 1.0 on the unperturbed boundary
    s = np.sum(np.abs(delta / radii.reshape(3, 1, 1, 1)) ** power,
               axis=0) ** (1.0 / power)
    norm = np.sqrt(np.sum(delta * delta, axis=0))
    norm = np.where(norm == 0.0, 1.0, norm)
    theta = np.arccos(np.clip(delta[0] / norm, -1.0, 1.0))
    phi = np.arctan2(delta[1], delta[2])
    boundary = 1.0 + amp * np.sin(f_theta * theta + phase_t) \
        * np.cos(f_phi * phi + phase_p)
    mask = s <= boundary
    labels, parts = ndimage.label(mask, structure=_SIX)
    if parts == 0:
        raise RuntimeError("degenerate blob")  # unreachable: center is inside
    if parts > 1:
        sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                                   index=range(1, parts + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    return mask, s


def generate_sample(spec: CohortSpec, label: int, rng,
                    sample_id: str = "s0000") -> VolumeSample:
    """Draw one labelled sample from the cohort distribution."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    amp = _AMP_BASE + _AMP_GAIN * spec.geometry_signal * label \
        + rng.normal(0.0, _AMP_NOISE)
    mask, s = _blob_mask(spec.dims, max(amp, 0.0), rng)

    channels = rng.normal(0.0, _BACKGROUND_NOISE,
                          (N_CHANNELS,) + tuple(spec.dims))
    for c, level in enumerate(_CHANNEL_LEVELS):
        channels[c][mask] += level + rng.normal(0.0, 0.15)
    core = mask & (s <= _CORE_EXTENT)
    if core.any():
        gain = _CORE_GAIN * spec.intensity_signal * label \
            + rng.normal(0.0, _CORE_NOISE)
        channels[CORE_CHANNEL][core] += gain
    return VolumeSample(sample_id=sample_id, channels=channels,
                        mask=mask, label=label)


def generate_cohort(spec: CohortSpec) -> list[VolumeSample]:
    """Generate the full cohort deterministically from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    n1 = int(round(spec.class_ratio * spec.n_samples))
    n1 = min(max(n1, 1), spec.n_samples - 1) if spec.n_samples > 1 else n1
    labels = np.array([1] * n1 + [0] * (spec.n_samples - n1))
    labels = labels[rng.permutation(spec.n_samples)]
    return [generate_sample(spec, int(y), rng, sample_id=f"s{i:04d}")
            for i, y in enumerate(labels)]


# ---------------------------------------------------------------------------
# Volume file I/O
# ---------------------------------------------------------------------------

_HEADER_KEYS = {"id", "dims", "channels", "dtype", "label"}


def save_volume(sample: VolumeSample, directory) -> Path:
    """Write <id>.json header and <id>.bin payload; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "id": sample.sample_id,
        "dims": list(sample.dims),
        "channels": N_CHANNELS,
        "dtype": "f32-le",
        "label": int(sample.label),
    }
    header_path = directory / f"{sample.sample_id}.json"
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    payload = sample.channels.astype("<f4").tobytes() \
        + sample.mask.astype(np.uint8).tobytes()
    (directory / f"{sample.sample_id}.bin").write_bytes(payload)
    return header_path


def load_volume(header_path) -> VolumeSample:
    """Read a sample back; raises on malformed or inconsistent files."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"unparseable header: {exc}") from exc
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise VolumeFormatError("header must carry exactly the keys "
                                f"{sorted(_HEADER_KEYS)}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise VolumeFormatError("dims must be three positive integers")
    if header["channels"] != N_CHANNELS:
        raise VolumeFormatError(
            f"expected {N_CHANNELS} channels, header says "
            f"{header['channels']}")
    if header["dtype"] != "f32-le":
        raise VolumeFormatError(f"unsupported dtype {header['dtype']!r}")
    if header["label"] not in (0, 1):
        raise VolumeFormatError("label must be 0 or 1")

    payload = (header_path.parent / f"{header_path.stem}.bin").read_bytes()
    d, h, w = dims
    voxels = d * h * w
    expected = N_CHANNELS * voxels * 4 + voxels
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise VolumeFormatError(
            f"payload holds {len(payload)} bytes, header promises {expected}")
    channels = np.frombuffer(payload[:N_CHANNELS * voxels * 4],
                             dtype="<f4").reshape(N_CHANNELS, d, h, w)
    mask_bytes = np.frombuffer(payload[N_CHANNELS * voxels * 4:],
                               dtype=np.uint8)
    if not np.isin(mask_bytes, (0, 1)).all():
        raise VolumeFormatError("mask bytes must be 0 or 1")
    return VolumeSample(sample_id=header["id"],
                        channels=channels.astype(np.float32),
                        mask=mask_bytes.reshape(d, h, w).astype(bool),
                        label=int(header["label"]))


def save_cohort(samples: Sequence[VolumeSample], directory) -> Path:
    """Write every sample plus a manifest listing ids and labels."""
    directory = Path(directory)
    for sample in samples:
        save_volume(sample, directory)
    manifest = [{"id": s.sample_id, "label": int(s.label)} for s in samples]
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_cohort(directory) -> list[VolumeSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return [load_volume(directory / f"{entry['id']}.json")
            for entry in manifest]


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _test_count(n: int) -> int:
    return int(round(n / 5.0))


def split_dataset(ids: Sequence[str], labels: Sequence[int] | None = None,
                  stratify: bool = False, seed: int = 0):
    """4:1 train/test partition, optionally stratified by label."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if len(ids) < 5:
        raise ValueError("need at least 5 samples for a 4:1 split")
    rng = np.random.default_rng(seed)
    if stratify:
        if labels is None or len(labels) != len(ids):
            raise ValueError("stratified split needs one label per id")
        test_pos: list[int] = []
        for cls in sorted(set(labels)):
            pos = [i for i, y in enumerate(labels) if y == cls]
            if len(pos) < 5:
                raise ValueError(
                    f"need at least 5 samples of class {cls} to stratify")
            order = rng.permutation(len(pos))
            test_pos.extend(pos[i] for i in order[:_test_count(len(pos))])
    else:
        order = rng.permutation(len(ids))
        test_pos = list(order[:_test_count(len(ids))])
    test_set = set(test_pos)
    train = [ids[i] for i in range(len(ids)) if i not in test_set]
    test = [ids[i] for i in range(len(ids)) if i in test_set]
    return train, test


def cv_folds(train_ids: Sequence[str], k: int, seed: int = 0):
    """k folds of (fit, val); each val block is one fifth of the ids."""
    ids = list(train_ids)
    if not 2 <= k <= 5:
        raise ValueError("k must lie in 2..5")
    if k > len(ids) or len(ids) < 5:
        raise ValueError("not enough samples for the requested folds")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    blocks = [list(b) for b in np.array_split(np.array(shuffled, object), 5)]
    folds = []
    for i in range(k):
        val = blocks[i]
        fit = [x for j, b in enumerate(blocks) if j != i for x in b]
        folds.append((fit, list(val)))
    return folds


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _perm_sign(perm) -> int:
    sign = 1
    perm = list(perm)
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                sign = -sign
    return sign


def _build_rotations():
    rotations = []
    for perm in itertools.permutations((0, 1, 2)):
        for flips in itertools.product((False, True), repeat=3):
            det = _perm_sign(perm) * (-1) ** sum(flips)
            if det == 1:
                rotations.append((perm, flips))
    return tuple(rotations)


_ROTATIONS = _build_rotations()


def rotation_count() -> int:
    return len(_ROTATIONS)


def rotate_grid(grid: np.ndarray, rotation: int) -> np.ndarray:
    """Apply one of the 24 proper axis-aligned rotations to the last
    three axes."""
    if not 0 <= rotation < len(_ROTATIONS):
        raise ValueError(f"rotation must lie in 0..{len(_ROTATIONS) - 1}")
    perm, flips = _ROTATIONS[rotation]
    off = grid.ndim - 3
    if off < 0:
        raise ValueError("grid must have at least 3 axes")
    out = np.transpose(grid, tuple(range(off)) + tuple(off + p for p in perm))
    axes = tuple(off + i for i, f in enumerate(flips) if f)
    if axes:
        out = np.flip(out, axis=axes)
    return np.ascontiguousarray(out)


def _build_inverses():
    probe = np.arange(27).reshape(3, 3, 3)
    images = [rotate_grid(probe, i) for i in range(len(_ROTATIONS))]
    inverses = []
    for i, img in enumerate(images):
        inverses.append(next(
            j for j in range(len(_ROTATIONS))
            if np.array_equal(rotate_grid(img, j), probe)))
    return tuple(inverses)


_INVERSES = _build_inverses()


def rotation_inverse(rotation: int) -> int:
    if not 0 <= rotation < len(_ROTATIONS):
        raise ValueError(f"rotation must lie in 0..{len(_ROTATIONS) - 1}")
    return _INVERSES[rotation]


def augment_rotate(sample: VolumeSample, rotation: int) -> VolumeSample:
    """Rotate channels and mask identically; label and id are preserved."""
    return replace(sample,
                   channels=rotate_grid(sample.channels, rotation),
                   mask=rotate_grid(sample.mask, rotation))


# ---------------------------------------------------------------------------
# Scoring and balancing
# ---------------------------------------------------------------------------

def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError("masks must share dimensions")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


_AUGMENT_TAG = ".rot"


def is_augmented(sample_id: str) -> bool:
    return _AUGMENT_TAG in sample_id


def balance_minority(samples: Sequence[VolumeSample]) -> list[VolumeSample]:
    """Equalize class counts by appending rotated minority copies.

    Copies get an ``<id>.rotNN`` provenance suffix; apply this after
    splitting so augmented ids never reach validation or test sets.
    """
    samples = list(samples)
    by_label = {0: [], 1: []}
    for s in samples:
        by_label[s.label].append(s)
    if not by_label[0] or not by_label[1]:
        raise ValueError("balancing needs both classes present")
    minority = 0 if len(by_label[0]) < len(by_label[1]) else 1
    need = len(by_label[1 - minority]) - len(by_label[minority])
    pool = by_label[minority]
    if need > len(pool) * (len(_ROTATIONS) - 1):
        raise ValueError("imbalance too extreme for distinct rotations")
    out = list(samples)
    for i in range(need):
        src = pool[i % len(pool)]
        rotation = 1 + i // len(pool)   # skip the identity rotation
        copy = augment_rotate(src, rotation)
        copy.sample_id = f"{src.sample_id}{_AUGMENT_TAG}{rotation:02d}"
        out.append(copy)
    return out


# ---------------------------------------------------------------------------
# Image-branch crop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropGrid:
    """Geometry tying a resampled crop back to volume voxel coordinates.

    Crop voxel (i, j, k) samples the volume voxel at
    origin[a] + indices[a][i] along each axis a.
    """

    origin: tuple               # bounding-box lower corner, 3 ints
    indices: tuple              # three (size,) int arrays into the box
    mask: np.ndarray            # (size, size, size) bool, resampled


def crop_grid(sample: VolumeSample, size: int = 32) -> CropGrid:
    """Nearest-neighbor sampling grid over the mask's bounding box."""
    if size < 1:
        raise ValueError("size must be positive")
    lo, hi = [], []
    for axis in range(3):
        prof = sample.mask.any(axis=tuple(a for a in range(3) if a != axis))
        nz = np.flatnonzero(prof)
        lo.append(int(nz[0]))
        hi.append(int(nz[-1]) + 1)
    idx = [np.minimum((np.arange(size) + 0.5) * ((b - a) / size),
                      b - a - 1).astype(int)
           for a, b in zip(lo, hi)]
    gi = [a + ix for a, ix in zip(lo, idx)]
    mask_r = sample.mask[np.ix_(gi[0], gi[1], gi[2])]
    return CropGrid(origin=tuple(lo), indices=tuple(idx), mask=mask_r)


def extract_crop(sample: VolumeSample, size: int = 32) -> np.ndarray:
    """Mask bounding box resampled to a cube for the image branch.

    Nearest-neighbor resampling, voxels outside the mask zeroed, each
    channel z-scored over its mask voxels.  Returns (4, size, size, size)
    float32.
    """
    grid = crop_grid(sample, size)
    gi = [o + ix for o, ix in zip(grid.origin, grid.indices)]
    mask_r = grid.mask
    out = np.empty((N_CHANNELS, size, size, size), dtype=np.float32)
    for c in range(N_CHANNELS):
        ch = sample.channels[c][np.ix_(gi[0], gi[1], gi[2])].astype(
            np.float64)
        vals = ch[mask_r]
        mean = float(vals.mean()) if vals.size else 0.0
        std = float(vals.std()) if vals.size else 1.0
        if std < 1e-8:
            std = 1.0
        out[c] = ((ch - mean) / std) * mask_r
    return out
