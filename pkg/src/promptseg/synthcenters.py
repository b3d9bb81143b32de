"""Synthetic multi-center PET/CT-like volumes, preprocessing, augmentation and splits.

Each center draws 2-channel volumes (CT-like in HU, PET-like in SUV) with
ellipsoidal primary (label 1) and nodal (label 2) lesions. Centers differ
in lesion contrast, channel gain/bias, noise and blur, which stands in for
scanner heterogeneity. Volumes are generated already aligned to one
orientation and at the target resolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError, SpecError

CT_CLIP = (-200.0, 200.0)
PET_CLIP = (0.0, 5.0)
LABELS = (0, 1, 2)


@dataclass
class Sample:
    volume: np.ndarray  # (C, X, Y, Z)
    mask: np.ndarray  # (X, Y, Z) uint8 labels
    center_id: str
    sample_id: str

    def __post_init__(self):
        if self.volume.ndim != 4 or self.volume.shape[1:] != self.mask.shape:
            raise ConfigError(f"volume {self.volume.shape} and mask {self.mask.shape} disagree")

    def equals(self, other):
        return (
            self.center_id == other.center_id
            and self.sample_id == other.sample_id
            and self.volume.dtype == other.volume.dtype
            and self.volume.shape == other.volume.shape
            and self.volume.tobytes() == other.volume.tobytes()
            and self.mask.tobytes() == other.mask.tobytes()
        )


@dataclass(frozen=True)
class CenterSpec:
    center_id: str
    n_samples: int = 10
    shape: tuple = (32, 32, 32)
    seed: int = 0
    # (gain, bias) applied to each channel after lesions are painted
    ct_gain: float = 1.0
    ct_bias: float = 0.0
    pet_gain: float = 1.0
    pet_bias: float = 0.0
    noise_sigma: tuple = (10.0, 0.1)  # per channel, in channel units
    blur_sigma: float = 0.0  # voxels; resolution proxy
    # lesion appearance: CT offset (HU) and PET uptake (SUV) per class
    primary_ct: float = 60.0
    primary_pet: float = 8.0
    nodal_ct: float = -40.0
    nodal_pet: float = 3.5
    primary_radius: tuple = (3.0, 5.0)
    nodal_count: tuple = (0, 2)
    nodal_radius: tuple = (1.5, 2.5)
    tissue_ct: float = 40.0
    tissue_pet: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "noise_sigma", tuple(float(v) for v in self.noise_sigma))
        object.__setattr__(self, "primary_radius", tuple(float(v) for v in self.primary_radius))
        object.__setattr__(self, "nodal_radius", tuple(float(v) for v in self.nodal_radius))
        object.__setattr__(self, "nodal_count", tuple(int(v) for v in self.nodal_count))
        if self.n_samples < 1:
            raise SpecError("n_samples must be >= 1")
        if self.blur_sigma < 0 or min(self.noise_sigma) < 0:
            raise SpecError("noise and blur sigmas must be >= 0")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SpecError(f"invalid shape {self.shape}")
        for name in ("primary_radius", "nodal_radius"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise SpecError(f"{name} must be an increasing positive range")
            if 2 * int(np.ceil(hi)) + 1 > min(self.shape):
                raise SpecError(f"{name} upper bound {hi} does not fit in volume {self.shape}")
        if self.nodal_count[0] < 0 or self.nodal_count[1] < self.nodal_count[0]:
            raise SpecError("nodal_count must be a non-negative increasing range")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_centers(n_per_center=(8, 10, 6, 8, 8, 10, 14), shape=(32, 32, 32), seed=0):
    """Seven centers shifted in contrast, gain, noise and blur.

    Sample counts follow the relative sizes of the real cohort at desk
    scale; the last center is the largest.
    """
    shifts = [
        dict(),
        dict(pet_gain=1.2, noise_sigma=(14.0, 0.15), blur_sigma=0.5),
        dict(ct_gain=0.9, ct_bias=10.0, nodal_pet=3.0),
        dict(pet_gain=0.9, blur_sigma=0.7, primary_ct=45.0),
        dict(noise_sigma=(18.0, 0.2), nodal_ct=-55.0),
        dict(ct_bias=-20.0, pet_gain=1.4, primary_ct=-30.0, nodal_ct=30.0, blur_sigma=1.0),
        dict(pet_gain=1.1, noise_sigma=(12.0, 0.12), blur_sigma=0.3),
    ]
    return [
        CenterSpec(f"center{i + 1}", n_samples=n, shape=shape, seed=seed * 1000 + i + 1, **kw)
        for i, (n, kw) in enumerate(zip(n_per_center, shifts))
    ]


def ellipsoid_mask(shape, center, radii):
    """Voxels whose integer coordinates satisfy sum(((v - c) / r)^2) <= 1."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _place_blob(rng, shape, radius_range):
    radii = rng.uniform(*radius_range, size=3)
    lo = np.ceil(radii).astype(int)
    center = [rng.integers(l, n - l) for l, n in zip(lo, shape)]
    return ellipsoid_mask(shape, center, radii)


def generate_center(spec):
    """Deterministically draw ``spec.n_samples`` raw samples."""
    rng = np.random.default_rng(spec.seed)
    return [_generate_sample(spec, rng, i) for i in range(spec.n_samples)]


def _generate_sample(spec, rng, index):
    shape = spec.shape
    # body: a large ellipsoid of soft tissue surrounded by air
    body = ellipsoid_mask(shape, [(n - 1) / 2 for n in shape], [0.48 * n for n in shape])
    texture = gaussian_filter(rng.standard_normal(shape), 2.0)
    texture /= max(texture.std(), 1e-12)
    ct = np.where(body, spec.tissue_ct + 15.0 * texture, -1000.0)
    pet = np.where(body, spec.tissue_pet * (1.0 + 0.2 * texture), 0.0)

    mask = np.zeros(shape, dtype=np.uint8)
    primary = _place_blob(rng, shape, spec.primary_radius)
    mask[primary] = 1
    for _ in range(rng.integers(spec.nodal_count[0], spec.nodal_count[1] + 1)):
        node = _place_blob(rng, shape, spec.nodal_radius) & (mask == 0)
        mask[node] = 2
    for label, dct, uptake in ((1, spec.primary_ct, spec.primary_pet), (2, spec.nodal_ct, spec.nodal_pet)):
        region = mask == label
        ct[region] = spec.tissue_ct + dct
        pet[region] = uptake

    ct = spec.ct_gain * ct + spec.ct_bias
    pet = spec.pet_gain * pet + spec.pet_bias
    if spec.blur_sigma > 0:
        ct = gaussian_filter(ct, spec.blur_sigma)
        pet = gaussian_filter(pet, spec.blur_sigma)
    ct = ct + spec.noise_sigma[0] * rng.standard_normal(shape)
    pet = pet + spec.noise_sigma[1] * rng.standard_normal(shape)
    volume = np.stack([ct, pet]).astype(np.float32)
    return Sample(volume, mask, spec.center_id, f"{spec.center_id}-{index:03d}")


# ---------------------------------------------------------------------------
# preprocessing


def clip_channels(volume):
    out = volume.copy()
    out[0] = np.clip(out[0], *CT_CLIP)
    out[1] = np.clip(out[1], *PET_CLIP)
    return out


def preprocess(sample, eps=1e-8):
    """Clip CT to [-200, 200] HU and PET to [0, 5] SUV, then standardise each
    channel of this sample to zero mean and unit variance.

    A constant channel becomes all zeros.
    """
    vol = clip_channels(sample.volume).astype(np.float64)
    for c in range(vol.shape[0]):
        mu = vol[c].mean()
        sd = vol[c].std()
        vol[c] = (vol[c] - mu) / sd if sd > eps else 0.0
    return Sample(vol.astype(sample.volume.dtype), sample.mask.copy(), sample.center_id, sample.sample_id)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class CropPlan:
    center: tuple
    foreground: bool  # whether the drawn centre is a lesion voxel
    flips: tuple = (False, False, False)
    rot_k: int = 0  # quarter turns in the plane of the first two spatial axes


def plan_crop(sample, rng, crop_size, p_flip=0.2, p_rot=0.2, fallback=True):
    """Draw one crop: a lesion-centred crop with probability 0.5, else a
    background-centred one. When the drawn class has no voxels the other
    class is used instead.
    """
    want_fg = rng.random() < 0.5
    fg_idx = np.flatnonzero(sample.mask)
    bg_idx = np.flatnonzero(sample.mask == 0)
    pool, fg = (fg_idx, True) if want_fg else (bg_idx, False)
    if pool.size == 0:
        if not fallback:
            raise ConfigError("requested class has no voxels")
        pool, fg = (bg_idx, False) if want_fg else (fg_idx, True)
    flat = pool[rng.integers(pool.size)]
    center = tuple(int(v) for v in np.unravel_index(flat, sample.mask.shape))
    flips = tuple(bool(rng.random() < p_flip) for _ in range(3))
    rot_k = int(rng.integers(1, 4)) if rng.random() < p_rot else 0
    return CropPlan(center, fg, flips, rot_k)


def crop_bounds(center, crop_size, shape):
    starts = []
    for c, s, n in zip(center, crop_size, shape):
        if s > n:
            raise ConfigError(f"crop {crop_size} larger than volume {shape}")
        starts.append(int(min(max(c - s // 2, 0), n - s)))
    return tuple(slice(a, a + s) for a, s in zip(starts, crop_size))


def apply_crop_plan(sample, plan, crop_size):
    sl = crop_bounds(plan.center, crop_size, sample.mask.shape)
    vol = sample.volume[(slice(None),) + sl]
    mask = sample.mask[sl]
    for axis, flip in enumerate(plan.flips):
        if flip:
            vol = np.flip(vol, axis=axis + 1)
            mask = np.flip(mask, axis=axis)
    if plan.rot_k:
        vol = np.rot90(vol, plan.rot_k, axes=(1, 2))
        mask = np.rot90(mask, plan.rot_k, axes=(0, 1))
    return Sample(np.ascontiguousarray(vol), np.ascontiguousarray(mask), sample.center_id, sample.sample_id)


def augment(sample, rng, crop_size=(16, 16, 16), num_crops=4, p_flip=0.2, p_rot=0.2):
    """``num_crops`` random crops, each independently flipped per axis and rotated."""
    crop_size = tuple(crop_size)
    plans = [plan_crop(sample, rng, crop_size, p_flip, p_rot) for _ in range(num_crops)]
    return [apply_crop_plan(sample, plan, crop_size) for plan in plans]


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    train: dict = field(default_factory=dict)  # center_id -> [sample_id]
    test: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)  # center_id -> [[sample_id], ...]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def split_70_30(samples, seed):
    """Shuffle and cut: ``floor(0.7 n)`` training samples, the rest test.

    Returns ``(train, test)`` lists of indices into ``samples``.
    """
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = (7 * n) // 10
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


def kfold(train_indices, k=5, seed=0):
    """Partition shuffled indices into ``k`` folds whose sizes differ by at most one."""
    train_indices = list(train_indices)
    if k < 1 or k > len(train_indices):
        raise ConfigError(f"cannot make {k} folds from {len(train_indices)} training samples")
    order = np.random.default_rng(seed).permutation(len(train_indices))
    return [[train_indices[i] for i in chunk] for chunk in np.array_split(order, k)]


def fold_train(folds, fold):
    """Training ids for cross-validation fold ``fold``: every other fold."""
    return sorted(i for j, f in enumerate(folds) if j != fold for i in f)


# ---------------------------------------------------------------------------
# binary volume files
#
# little-endian layout:
#   magic      8s   b"PSVOLUME"
#   version    H
#   dtype      B    0 = float32, 1 = float64
#   channels   H
#   dims       3I
#   center_id  H + utf-8 bytes
#   sample_id  H + utf-8 bytes
#   volume     C*X*Y*Z * itemsize
#   mask       X*Y*Z uint8

VOLUME_MAGIC = b"PSVOLUME"
VOLUME_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def volume_header_size(center_id, sample_id):
    return 8 + 2 + 1 + 2 + 12 + 2 + len(center_id.encode()) + 2 + len(sample_id.encode())


def write_volume(sample, path):
    code = _DTYPE_CODES.get(sample.volume.dtype)
    if code is None:
        raise ConfigError(f"unsupported volume dtype {sample.volume.dtype}")
    cid, sid = sample.center_id.encode(), sample.sample_id.encode()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<HBH3I", VOLUME_VERSION, code, sample.volume.shape[0], *sample.mask.shape))
        fh.write(struct.pack("<H", len(cid)) + cid)
        fh.write(struct.pack("<H", len(sid)) + sid)
        fh.write(sample.volume.astype(sample.volume.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(sample.mask.astype(np.uint8, copy=False).tobytes())


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise FormatError(f"truncated file while reading {what}", offset)
    return buf[offset : offset + n], offset + n


def read_volume(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, off = _take(buf, 0, 8, "magic")
    if raw != VOLUME_MAGIC:
        raise FormatError("bad magic", 0)
    raw, off2 = _take(buf, off, 17, "header")
    version, code, channels, x, y, z = struct.unpack("<HBH3I", raw)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported version {version}", off)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", off + 2)
    off = off2
    ids = []
    for what in ("center_id", "sample_id"):
        raw, off = _take(buf, off, 2, what + " length")
        (n,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, n, what)
        ids.append(raw.decode())
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    nvox = x * y * z
    raw, off = _take(buf, off, channels * nvox * dtype.itemsize, "volume buffer")
    volume = np.frombuffer(raw, dtype=dtype).reshape(channels, x, y, z).astype(_DTYPES[code])
    raw, off = _take(buf, off, nvox, "mask buffer")
    mask = np.frombuffer(raw, dtype=np.uint8).reshape(x, y, z).copy()
    if off != len(buf):
        raise FormatError("trailing bytes after mask buffer", off)
    return Sample(volume, mask, ids[0], ids[1])


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
