"""Volume and case data model, MMV raw format, synthetic phantoms, augmentation, folds."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ._io import atomic_write_bytes

NUM_MODALITIES = 4
MMV_MAGIC = b"MMV1"
MMV_HEADER = struct.Struct("<4sIIII")
DTYPE_F32 = 0
# Refuse headers that would describe more than 2**31 voxels (8 GiB of payload).
MAX_VOXELS = 2**31


class VolumeFormatError(ValueError):
    """Base class for malformed MMV files."""


class BadMagicError(VolumeFormatError):
    pass


class DimensionOverflowError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_id: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with all dims >= 1, got {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.modality_id)


@dataclass
class Case:
    case_id: str
    volumes: list[Volume]
    label: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        ids = [v.modality_id for v in self.volumes]
        if ids != list(range(len(self.volumes))):
            raise ValueError(f"expected one volume per modality 0..{len(self.volumes) - 1}, got {ids}")
        shapes = {v.shape for v in self.volumes}
        if len(shapes) != 1:
            raise ValueError(f"modalities of case {self.case_id} are not aligned: {shapes}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.volumes[0].shape

    def stacked(self) -> np.ndarray:
        """(M+1, D, H, W) float32 array."""
        return np.stack([v.data for v in self.volumes])


@dataclass
class Dataset:
    cases: list[Case]

    @property
    def class_counts(self) -> tuple[int, int]:
        labels = [c.label for c in self.cases]
        return labels.count(0), labels.count(1)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.cases], dtype=np.int64)

    def __len__(self):
        return len(self.cases)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.cases[i] for i in indices])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.cases:
            h.update(f"{c.case_id}:{c.label}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class FoldSplit:
    fold_assignments: dict
    seed: int
    k: int = 3

    def indices(self, dataset: Dataset, fold: int) -> tuple[list[int], list[int]]:
        """(train, test) case indices for one held-out fold."""
        train, test = [], []
        for i, c in enumerate(dataset.cases):
            (test if self.fold_assignments[c.case_id] == fold else train).append(i)
        return train, test


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.25
    affine_degrees: tuple[float, float] = (-10.0, 10.0)
    affine_scale: tuple[float, float] = (0.9, 1.2)
    intensity_percentiles: tuple[float, float] = (0.5, 99.5)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        for lo, hi in (self.affine_degrees, self.affine_scale):
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        lo, hi = self.intensity_percentiles
        if not 0.0 <= lo < hi <= 100.0:
            raise ValueError(f"bad percentile pair {self.intensity_percentiles}")


# ---------------------------------------------------------------- MMV format


def encode_volume(v: Volume) -> bytes:
    d, h, w = v.shape
    return MMV_HEADER.pack(MMV_MAGIC, d, h, w, DTYPE_F32) + v.data.astype("<f4").tobytes()


def decode_volume(buf: bytes, modality_id: int = 0) -> Volume:
    if len(buf) < MMV_HEADER.size:
        raise TruncatedPayloadError(f"file shorter than the {MMV_HEADER.size}-byte header")
    magic, d, h, w, dtype_code = MMV_HEADER.unpack_from(buf)
    if magic != MMV_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MMV_MAGIC!r}")
    if dtype_code != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype_code}")
    if min(d, h, w) < 1 or d * h * w > MAX_VOXELS:
        raise DimensionOverflowError(f"invalid dimensions {d}x{h}x{w}")
    expected = MMV_HEADER.size + 4 * d * h * w
    if len(buf) < expected:
        raise TruncatedPayloadError(f"payload has {len(buf) - MMV_HEADER.size} bytes, expected {4 * d * h * w}")
    if len(buf) > expected:
        raise VolumeFormatError(f"{len(buf) - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=MMV_HEADER.size)
    return Volume(data.reshape(d, h, w).astype(np.float32), modality_id=modality_id)


def write_volume(v: Volume, path) -> None:
    atomic_write_bytes(Path(path), encode_volume(v))


def read_volume(path, modality_id: Optional[int] = None) -> Volume:
    """Read an MMV file.

    The format carries no spacing or modality tag; spacing comes back as 1 mm
    isotropic and the modality id is taken from a ``mod<k>.mmv`` file name
    unless given explicitly.
    """
    path = Path(path)
    if modality_id is None:
        stem = path.stem
        modality_id = int(stem[3:]) if stem.startswith("mod") and stem[3:].isdigit() else 0
    return decode_volume(path.read_bytes(), modality_id)


def write_dataset(dataset: Dataset, root, cues: bool = True) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in dataset.cases:
        case_dir = root / case.case_id
        case_dir.mkdir(exist_ok=True)
        for v in case.volumes:
            write_volume(v, case_dir / f"mod{v.modality_id}.mmv")
        atomic_write_bytes(case_dir / "label.txt", f"{case.label}\n".encode())
        if cues and "cues" in case.meta:
            c1, c2 = case.meta["cues"]
            atomic_write_bytes(case_dir / "cues.txt", f"{c1} {c2}\n".encode())


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    cases = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label_file = case_dir / "label.txt"
        if not label_file.exists():
            continue
        label = int(label_file.read_text().strip())
        files = sorted(case_dir.glob("mod*.mmv"), key=lambda p: int(p.stem[3:]))
        volumes = [read_volume(f) for f in files]
        meta = {}
        cue_file = case_dir / "cues.txt"
        if cue_file.exists():
            meta["cues"] = tuple(int(t) for t in cue_file.read_text().split())
        cases.append(Case(case_dir.name, volumes, label, meta))
    if not cases:
        raise FileNotFoundError(f"no cases found under {root}")
    return Dataset(cases)


# ---------------------------------------------------------------- geometry


def crop_depth(v: Volume, target_depth: int) -> Volume:
    """Center crop along depth; the odd leftover slice is dropped at the front."""
    depth = v.shape[0]
    if target_depth < 1 or target_depth > depth:
        raise ValueError(f"cannot crop depth {depth} to {target_depth}")
    excess = depth - target_depth
    front = math.ceil(excess / 2)
    return v.replace(v.data[front:front + target_depth].copy())


def rescale_intensity(data: np.ndarray, percentiles=(0.5, 99.5)) -> np.ndarray:
    lo, hi = np.percentile(data, percentiles)
    if not hi > lo:
        return np.zeros_like(data, dtype=np.float32)
    return np.clip((data - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def _inplane_affine(data: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    # Rotation + isotropic zoom about each slice center; depth axis untouched.
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # output -> input coordinate map is the inverse of the forward transform
    inv = np.array([[c, s], [-s, c]]) / scale
    matrix = np.eye(3)
    matrix[1:, 1:] = inv
    center = (np.array(data.shape, dtype=float) - 1) / 2
    offset = center - matrix @ center
    return ndimage.affine_transform(data, matrix, offset=offset, order=0, mode="nearest")


def preprocess(case: Case, cfg: AugmentConfig) -> Case:
    """Deterministic part of the pipeline (intensity rescale only)."""
    vols = [v.replace(rescale_intensity(v.data, cfg.intensity_percentiles)) for v in case.volumes]
    return Case(case.case_id, vols, case.label, case.meta)


def augment_array(stack: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, channels=None) -> np.ndarray:
    """Augment a (M+1, D, H, W) stack with one shared random transform.

    Only ``channels`` are transformed when given; the rest come back as zeros.
    The RNG draws do not depend on ``channels``.
    """
    flip = rng.random() < cfg.flip_prob
    angle = rng.uniform(*cfg.affine_degrees)
    scale = rng.uniform(*cfg.affine_scale)
    out = np.zeros_like(stack, dtype=np.float32)
    for m in range(stack.shape[0]) if channels is None else channels:
        data = stack[m]
        if flip:
            data = data[:, :, ::-1]
        if angle != 0.0 or scale != 1.0:
            data = _inplane_affine(data, angle, scale)
        out[m] = rescale_intensity(data, cfg.intensity_percentiles)
    return out


def augment(case: Case, cfg: AugmentConfig, rng: np.random.Generator) -> Case:
    """Random flip + in-plane affine shared by all modalities, then per-volume rescale."""
    arr = augment_array(case.stacked(), cfg, rng)
    vols = [v.replace(arr[m]) for m, v in enumerate(case.volumes)]
    return Case(case.case_id, vols, case.label, case.meta)


# ---------------------------------------------------------------- synthetic data

_BACKGROUND = (0.25, 0.30, 0.20, 0.25)
_BODY = (0.55, 0.65, 0.08, 0.55)
_RIM_INTENSITY = 1.0
_RIM_WIDTH = 0.3
_HALO_INTENSITY = 0.40
_HALO_WIDTH = 0.9


def render_phantom(shape, center, radii, c1: int, c2: int) -> np.ndarray:
    """Noise-free (4, D, H, W) phantom.

    Modality 0 carries a bright rim around the lesion iff ``c1``; modality 3
    carries a wide halo iff ``c2``. Modalities 1 and 2 only show the lesion body.
    """
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    brain_c = [(n - 1) / 2 for n in shape]
    brain = sum(((g - c) / (0.47 * n)) ** 2 for g, c, n in zip(grids, brain_c, shape)) <= 1.0
    rho = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))
    body = rho <= 1.0
    out = np.zeros((NUM_MODALITIES,) + tuple(shape), dtype=np.float32)
    for m in range(NUM_MODALITIES):
        out[m][brain] = _BACKGROUND[m]
    if c2:
        out[3][(rho > 1.0) & (rho <= 1.0 + _HALO_WIDTH)] = _HALO_INTENSITY
    if c1:
        out[0][(rho > 1.0) & (rho <= 1.0 + _RIM_WIDTH)] = _RIM_INTENSITY
    for m in range(NUM_MODALITIES):
        out[m][body] = _BODY[m]
    return out


def synth_dataset(n_cases: int, shape=(32, 64, 64), noise_sigma: float = 0.1, seed: int = 0) -> Dataset:
    """Multi-modal AND-cue phantoms: label = c1 AND c2, with c1 seen only in
    modality 0 and c2 only in modality 3."""
    if n_cases < 2:
        raise ValueError("n_cases must be at least 2")
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 8:
        raise ValueError(f"shape must be 3 dims each >= 8, got {shape}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    cases = []
    dims = np.array(shape, dtype=float)
    for idx in range(n_cases):
        c1, c2 = (int(b) for b in rng.integers(0, 2, size=2))
        center = (dims - 1) / 2 + rng.uniform(-0.1, 0.1, size=3) * dims
        radii = rng.uniform(0.13, 0.18, size=3) * dims
        vols = render_phantom(shape, center, radii, c1, c2)
        if noise_sigma > 0:
            vols = vols + rng.normal(0.0, noise_sigma, size=vols.shape).astype(np.float32)
        volumes = [Volume(vols[m], modality_id=m) for m in range(NUM_MODALITIES)]
        cases.append(Case(f"case{idx:04d}", volumes, c1 & c2, {"cues": (c1, c2)}))
    return Dataset(cases)


# ---------------------------------------------------------------- folds


def split_folds(dataset: Dataset, k: int = 3, seed: int = 0) -> FoldSplit:
    n = len(dataset)
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignments = {dataset.cases[i].case_id: int(pos % k) for pos, i in enumerate(order)}
    return FoldSplit(assignments, seed, k)
