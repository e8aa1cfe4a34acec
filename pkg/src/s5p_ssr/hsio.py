"""Data ingestion, cleaning, normalization, patching and split management.

Also hosts the synthetic scene generator used to exercise the full pipeline
at desk scale when no granules are available.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import IngestionError, MisuseError, ShapeError, SpecError
from .sensor import NORMALIZED, OUTLIER_SENTINEL, RAW, HyperCube

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

#: Dataset group template inside a granule file; {band} is the band number.
L1B_GROUP_TEMPLATE = "BAND{band}_RADIANCE/STANDARD_MODE/OBSERVATIONS/radiance"
L1B_FILL_VALUE = np.float32(9.96921e36)


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

def clean(cube: HyperCube, t: float = 1e-2) -> HyperCube:
    """Remove corrupted radiance values.

    Values in (-t, 0) are clipped to zero; values with magnitude >= t are
    replaced by the median of the valid (non-outlier) pixels in their 3x3
    neighbourhood, falling back to the channel median when the whole
    neighbourhood is invalid. Medians are taken after the negative clipping
    so every output value lies in [0, t), which also makes clean idempotent.
    """
    if t <= 0:
        raise SpecError(f"cleaning threshold must be positive, got {t}")
    cube.require_space(RAW, "clean")
    data = cube.data.astype(np.float64, copy=True)
    outlier = (data <= -t) | (data >= t)
    data[(data > -t) & (data < 0)] = 0.0

    fallbacks = 0
    for c in range(data.shape[0]):
        ii, jj = np.nonzero(outlier[c])
        if ii.size == 0:
            continue
        chan = np.where(outlier[c], np.nan, data[c])
        padded = np.full((chan.shape[0] + 2, chan.shape[1] + 2), np.nan)
        padded[1:-1, 1:-1] = chan
        neigh = np.empty((8, ii.size))
        k = 0
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                neigh[k] = padded[ii + 1 + di, jj + 1 + dj]
                k += 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN windows
            med = np.nanmedian(neigh, axis=0)
        dead = np.isnan(med)
        if dead.any():
            fallbacks += int(dead.sum())
            valid = chan[~np.isnan(chan)]
            med[dead] = np.median(valid) if valid.size else 0.0
        data[c, ii, jj] = med
    if fallbacks:
        log.warning("clean: %d pixels had no valid neighbours, used channel median", fallbacks)
    return HyperCube(data.astype(cube.data.dtype), band_id=cube.band_id, space=RAW)


def discard_polar(cube: HyperCube, fraction: float = 0.05) -> HyperCube:
    """Drop the top and bottom ``fraction`` of along-track rows."""
    if not 0 <= fraction < 0.5:
        raise SpecError(f"polar fraction must be in [0, 0.5), got {fraction}")
    h = cube.data.shape[1]
    k = int(h * fraction)
    if k == 0:
        return cube
    return HyperCube(cube.data[:, k : h - k, :].copy(), cube.band_id, cube.space)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class ChannelStats:
    """Per-channel mean/std computed from the training split only."""

    mean: np.ndarray
    std: np.ndarray
    band_id: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean/std must be 1-D arrays of equal length")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.band_id.encode())
        h.update(self.mean.tobytes())
        h.update(self.std.tobytes())
        return h.hexdigest()[:16]

    def save(self, path):
        np.savez(path, mean=self.mean, std=self.std, band_id=self.band_id)

    @classmethod
    def load(cls, path) -> "ChannelStats":
        z = np.load(path, allow_pickle=False)
        return cls(mean=z["mean"], std=z["std"], band_id=str(z["band_id"]))


STD_FLOOR = 1e-12


def compute_channel_stats(
    training_cubes,
    image_ids=None,
    manifest: "DatasetManifest | None" = None,
) -> ChannelStats:
    """Population mean/std per channel over all training pixels.

    When a manifest is supplied, ``image_ids`` must name where each cube came
    from, and any id outside the manifest's train split is rejected. That
    guard is what keeps normalization statistics leak-free.
    """
    cubes = list(training_cubes)
    if not cubes:
        raise ValueError("need at least one training cube")
    band = cubes[0].band_id
    if any(c.band_id != band for c in cubes):
        raise ValueError("all cubes must share one band")
    if manifest is not None:
        if image_ids is None:
            raise MisuseError("manifest guard requires image_ids")
        train = {i for i, s in manifest.assignments.items() if s == "train"}
        bad = [i for i in image_ids if i not in train]
        if bad:
            raise MisuseError(f"stats may only use train images; offending ids: {bad}")
    c = cubes[0].channels
    total = np.zeros(c)
    total_sq = np.zeros(c)
    n = 0
    for cube in cubes:
        flat = cube.data.reshape(c, -1).astype(np.float64)
        total += flat.sum(axis=1)
        total_sq += (flat**2).sum(axis=1)
        n += flat.shape[1]
    mean = total / n
    var = np.maximum(total_sq / n - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return ChannelStats(mean=mean, std=std, band_id=band)


def normalize(cube: HyperCube, stats: ChannelStats, direction: str = "forward") -> HyperCube:
    """Channel-wise standardization (forward) or its exact inverse."""
    if cube.band_id != stats.band_id:
        raise ValueError(f"band mismatch: cube {cube.band_id}, stats {stats.band_id}")
    if cube.channels != stats.mean.shape[0]:
        raise ShapeError("channel count does not match stats")
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    if direction == "forward":
        cube.require_space(RAW, "normalize forward")
        data = (cube.data - mean) / std
        return HyperCube(data.astype(cube.data.dtype), cube.band_id, NORMALIZED)
    if direction == "inverse":
        cube.require_space(NORMALIZED, "normalize inverse")
        data = cube.data * std + mean
        return HyperCube(data.astype(cube.data.dtype), cube.band_id, RAW)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# ---------------------------------------------------------------------------
# cropping / patching / splits
# ---------------------------------------------------------------------------

def crop_and_patch(cube: HyperCube, along_crop: int = 512, patch: int = 112):
    """Cut non-overlapping along-track crops, then non-overlapping patches.

    Returns a list of ``(row, col, HyperCube)`` with absolute top-left pixel
    coordinates; remainders along either axis are discarded.
    """
    if along_crop < 1 or patch < 1:
        raise SpecError("along_crop and patch must be positive")
    _, h, w = cube.data.shape
    out = []
    if h < min(along_crop, patch) or w < patch:
        warnings.warn(f"cube {cube.data.shape} smaller than one {patch}x{patch} patch")
        return out
    for r0 in range(0, h - along_crop + 1, along_crop):
        for i in range(0, along_crop - patch + 1, patch):
            for j in range(0, w - patch + 1, patch):
                row, col = r0 + i, j
                tile = cube.data[:, row : row + patch, col : col + patch].copy()
                out.append((row, col, HyperCube(tile, cube.band_id, cube.space)))
    if not out:
        warnings.warn(f"no {patch}x{patch} patches fit in cube of shape {cube.data.shape}")
    return out


@dataclass
class DatasetManifest:
    """Frozen record of the split assignment and patch layout."""

    fractions: tuple
    seed: int
    lr_seed: int
    assignments: dict = field(default_factory=dict)
    patches: list = field(default_factory=list)  # (image_id, row, col, size)
    band_id: str = ""

    def ids(self, split: str):
        return sorted(i for i, s in self.assignments.items() if s == split)

    def patches_for(self, split: str):
        members = set(self.ids(split))
        return [p for p in self.patches if p[0] in members]

    def to_dict(self) -> dict:
        return {
            "fractions": list(self.fractions),
            "seed": self.seed,
            "lr_seed": self.lr_seed,
            "assignments": self.assignments,
            "patches": [list(p) for p in self.patches],
            "band_id": self.band_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            fractions=tuple(d["fractions"]),
            seed=d["seed"],
            lr_seed=d["lr_seed"],
            assignments=dict(d["assignments"]),
            patches=[tuple(p) for p in d["patches"]],
            band_id=d.get("band_id", ""),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def split_scanlines(image_ids, fractions=(0.65, 0.20, 0.15), seed: int = 0,
                    lr_seed: int | None = None) -> DatasetManifest:
    """Deterministically assign images to train/val/test by the fractions.

    Counts are floors of ``n * fraction`` with the remainder distributed by
    largest fractional part (ties favour train, then val).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative reals")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    ids = list(image_ids)
    n_positive = sum(1 for f in fractions if f > 0)
    if len(ids) < n_positive:
        raise ValueError(f"{len(ids)} images cannot fill {n_positive} splits")
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")

    rng = np.random.default_rng(seed)
    order = [ids[k] for k in rng.permutation(len(ids))]
    n = len(ids)
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    rest = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(n - sum(counts)):
        counts[rest[i % 3]] += 1

    assignments = {}
    pos = 0
    for split, count in zip(SPLITS, counts):
        for image_id in order[pos : pos + count]:
            assignments[image_id] = split
        pos += count
    return DatasetManifest(
        fractions=fractions,
        seed=seed,
        lr_seed=seed if lr_seed is None else lr_seed,
        assignments=assignments,
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synth_scene(
    channels: int,
    H: int,
    W: int,
    seed: int,
    smoothness: float = 4.0,
    spectral_rank: int = 3,
    band_id: str = "SYN",
    level: float = 1e-5,
) -> HyperCube:
    """Generate a positive, exactly low-rank hyperspectral scene.

    The scene is a spectral mixture of ``spectral_rank`` smooth abundance
    maps (Gaussian-filtered noise) decorated with bright blobs and a step
    edge, so spatial structure spans several frequency ranges. ``level``
    scales values into a radiance-like range below the cleaning threshold.
    """
    if spectral_rank < 1 or spectral_rank > channels:
        raise SpecError(f"spectral_rank must be in [1, {channels}], got {spectral_rank}")
    rng = np.random.default_rng(seed)
    maps = rng.standard_normal((spectral_rank, H, W))
    maps = gaussian_filter(maps, sigma=(0, smoothness, smoothness), mode="reflect")

    ii, jj = np.mgrid[0:H, 0:W]
    n_blobs = 6
    centers = rng.uniform(0.1, 0.9, size=(n_blobs, 2)) * np.array([H, W])
    r_lo = max(1.5, 0.01 * min(H, W))
    radii = rng.uniform(r_lo, max(1.5 * r_lo, 0.05 * min(H, W)), size=n_blobs)
    for b in range(n_blobs):
        bump = np.exp(-((ii - centers[b, 0]) ** 2 + (jj - centers[b, 1]) ** 2) / (2 * radii[b] ** 2))
        maps[b % spectral_rank] += 1.5 * bump

    # "Coastline": a slanted step edge added to the first map.
    slope = rng.uniform(-0.3, 0.3)
    offset = rng.uniform(0.35, 0.65) * W
    maps[0] += 0.8 * ((jj - (slope * ii + offset)) > 0)

    # Shift-only positivity so filtering strength still shows up in variance.
    maps = maps - maps.min(axis=(1, 2), keepdims=True) + 0.05
    signatures = 0.3 + rng.random((channels, spectral_rank))
    cube = (signatures @ maps.reshape(spectral_rank, -1)).reshape(channels, H, W)
    return HyperCube((level * cube).astype(np.float32), band_id=band_id, space=RAW)


# ---------------------------------------------------------------------------
# granule io
# ---------------------------------------------------------------------------

def _band_number(band_id: str) -> int:
    try:
        return int(band_id.removeprefix("BD"))
    except ValueError:
        raise IngestionError(f"cannot derive a band number from {band_id!r}")


def write_l1b_like(path, cube: HyperCube, fill_mask: np.ndarray | None = None,
                   template: str = L1B_GROUP_TEMPLATE):
    """Write a cube as a granule-like HDF5 file (for tests and round trips).

    Layout is (time=1, scanline, ground_pixel, channel) with a _FillValue
    attribute; ``fill_mask`` marks entries (C, H, W) to overwrite with fills.
    """
    dataset_path = template.format(band=_band_number(cube.band_id))
    data = np.transpose(cube.data.astype(np.float32), (1, 2, 0))[None]
    if fill_mask is not None:
        data[0][np.transpose(fill_mask, (1, 2, 0))] = L1B_FILL_VALUE
    with h5py.File(path, "w") as f:
        ds = f.create_dataset(dataset_path, data=data)
        ds.attrs["_FillValue"] = L1B_FILL_VALUE
        ds.attrs["units"] = "mol.m-2.nm-1.sr-1.s-1"


def load_l1b(path, band_id: str, template: str = L1B_GROUP_TEMPLATE) -> HyperCube:
    """Load a granule's radiance group as a raw-space cube.

    Fill values are mapped to a large positive sentinel that the cleaning
    threshold treats as an outlier.
    """
    dataset_path = template.format(band=_band_number(band_id))
    if not Path(path).exists():
        raise IngestionError(f"granule file not found: {path}")
    with h5py.File(path, "r") as f:
        if dataset_path not in f:
            raise IngestionError(f"{path}: missing dataset {dataset_path!r}")
        ds = f[dataset_path]
        data = np.asarray(ds[...], dtype=np.float32)
        fill = ds.attrs.get("_FillValue")
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise IngestionError(f"expected a single time step, got {data.shape[0]}")
        data = data[0]
    if data.ndim != 3:
        raise IngestionError(f"radiance dataset must be 3-D or 4-D, got shape {data.shape}")
    data = np.transpose(data, (2, 0, 1))
    bad = ~np.isfinite(data)
    if fill is not None:
        bad |= data == np.float32(fill)
    data[bad] = OUTLIER_SENTINEL
    return HyperCube(data, band_id=band_id, space=RAW)
