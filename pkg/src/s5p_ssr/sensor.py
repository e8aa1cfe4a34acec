"""Sensor image-formation model.

The instrument observation of a high-resolution scene x is modelled as
``y = A(x) + n`` where A applies a band-dependent anisotropic Gaussian blur
followed by spatial subsampling by the band's scale factor, and n is
zero-mean Gaussian noise whose standard deviation is derived from band SNR
metadata as ``sigma = mu / snr_linear``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .errors import ShapeError, SpaceError, SpecError

RAW = "raw"
NORMALIZED = "normalized"

#: Sentinel written in place of fill values by the granule loader; always
#: above the cleaning threshold so `hsio.clean` removes it.
OUTLIER_SENTINEL = 1.0e30


@dataclass
class HyperCube:
    """A single-band hyperspectral image, channels x along-track x cross-track.

    ``space`` tracks whether values are physical radiances ("raw") or
    channel-wise standardized ("normalized"); operations that care assert it.
    """

    data: np.ndarray
    band_id: str
    space: str = RAW

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"cube must be 3-D (C, H, W), got shape {self.data.shape}")
        if self.space not in (RAW, NORMALIZED):
            raise SpaceError(f"unknown space {self.space!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def require_space(self, space: str, what: str = "operation"):
        if self.space != space:
            raise SpaceError(f"{what} requires a {space}-space cube, got {self.space}")
        return self


@dataclass(frozen=True)
class BandSpec:
    """Per-band sensor metadata; ``sigma`` is derived, never stored."""

    band_id: str
    channels: int
    snr_linear: float
    mu: float
    blur_sigma_along: float = 1.5
    blur_sigma_cross: float = 1.0
    scale: int = 4
    lr_patch: int = 112

    def __post_init__(self):
        if self.channels < 1:
            raise SpecError(f"{self.band_id}: channels must be positive")
        if self.snr_linear <= 0 or self.mu <= 0:
            raise SpecError(f"{self.band_id}: SNR and mean radiance must be positive")
        if self.blur_sigma_along <= 0 or self.blur_sigma_cross <= 0:
            raise SpecError(f"{self.band_id}: blur sigmas must be positive")
        if self.scale < 1 or self.lr_patch < 1:
            raise SpecError(f"{self.band_id}: scale and lr_patch must be positive")

    @property
    def sigma(self) -> float:
        """Noise standard deviation in raw radiance units."""
        return self.mu / self.snr_linear


def load_band_specs(path: str | Path | None = None) -> dict[str, BandSpec]:
    """Load band metadata from a YAML file (packaged defaults when omitted)."""
    if path is None:
        text = resources.files("s5p_ssr.data").joinpath("bands.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text)
    specs = {}
    for band_id, fields_ in raw.items():
        specs[band_id] = BandSpec(band_id=band_id, **fields_)
    return specs


def noise_sigma_from_metadata(snr: float, is_db: bool, mu: float) -> float:
    """Noise standard deviation from band SNR metadata.

    Decibel values are first converted to linear scale,
    ``snr_linear = 10**(snr_db / 10)``, then ``sigma = mu / snr_linear``.
    """
    if mu <= 0:
        raise SpecError(f"mean radiance must be positive, got {mu}")
    snr_linear = 10.0 ** (snr / 10.0) if is_db else snr
    if snr_linear <= 0:
        raise SpecError(f"SNR must be positive after conversion, got {snr_linear}")
    return mu / snr_linear


@dataclass(frozen=True)
class BlurKernel:
    """Separable anisotropic Gaussian kernel, normalized to unit sum."""

    weights: np.ndarray
    sigma_along: float
    sigma_cross: float
    profile_along: np.ndarray = field(repr=False, default=None)
    profile_cross: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self) -> tuple:
        return self.weights.shape


def _gaussian_profile(sigma: float, truncation: float) -> np.ndarray:
    half = math.ceil(truncation * sigma)
    t = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def gaussian_kernel(sigma_along: float, sigma_cross: float,
                    truncation: float = 4.0) -> BlurKernel:
    """Separable anisotropic Gaussian kernel with unit sum, truncated at
    ``truncation`` standard deviations (side ``2*ceil(truncation*sigma)+1``)."""
    if truncation <= 0:
        raise SpecError(f"truncation must be positive, got {truncation}")
    if sigma_along <= 0 or sigma_cross <= 0:
        raise SpecError("blur sigmas must be positive")
    g_along = _gaussian_profile(sigma_along, truncation)
    g_cross = _gaussian_profile(sigma_cross, truncation)
    weights = np.outer(g_along, g_cross)
    weights /= weights.sum()
    return BlurKernel(
        weights=weights,
        sigma_along=sigma_along,
        sigma_cross=sigma_cross,
        profile_along=g_along,
        profile_cross=g_cross,
    )


def make_blur_kernel(spec: BandSpec, truncation: float = 4.0) -> BlurKernel:
    """Build the band's blur kernel from its along/cross-track sigmas."""
    return gaussian_kernel(spec.blur_sigma_along, spec.blur_sigma_cross, truncation)


class DegradationOperator:
    """Differentiable forward operator ``A(x) = (x * k) ↓ s``.

    Blur borders are renormalized over the in-image kernel support (no
    padding content is invented), and subsampling picks the centre-of-block
    phase ``floor(s/2)``. The operator is linear and preserves constants.
    """

    def __init__(self, kernel: BlurKernel, scale: int):
        if scale < 1:
            raise SpecError(f"scale must be a positive integer, got {scale}")
        self.kernel = kernel
        self.scale = int(scale)
        self._mask_cache: dict = {}

    def _profiles(self, dtype, device):
        ka = torch.as_tensor(self.kernel.profile_along, dtype=dtype, device=device)
        kc = torch.as_tensor(self.kernel.profile_cross, dtype=dtype, device=device)
        return ka.view(1, 1, -1, 1), kc.view(1, 1, 1, -1)

    def _border_mask(self, h: int, w: int, dtype, device):
        key = (h, w, dtype, device)
        mask = self._mask_cache.get(key)
        if mask is None:
            ka, kc = self._profiles(dtype, device)
            ones_h = torch.ones(1, 1, h, 1, dtype=dtype, device=device)
            ones_w = torch.ones(1, 1, 1, w, dtype=dtype, device=device)
            mh = F.conv2d(ones_h, ka, padding=(ka.shape[2] // 2, 0))
            mw = F.conv2d(ones_w, kc, padding=(0, kc.shape[3] // 2))
            mask = mh * mw
            self._mask_cache[key] = mask
        return mask

    def blur(self, x: torch.Tensor) -> torch.Tensor:
        """Border-renormalized separable blur, same spatial size."""
        if x.ndim != 3:
            raise ShapeError(f"expected (C, H, W) tensor, got shape {tuple(x.shape)}")
        c, h, w = x.shape
        ka, kc = self._profiles(x.dtype, x.device)
        out = x.reshape(c, 1, h, w)
        out = F.conv2d(out, ka, padding=(ka.shape[2] // 2, 0))
        out = F.conv2d(out, kc, padding=(0, kc.shape[3] // 2))
        out = out / self._border_mask(h, w, x.dtype, x.device)
        return out.reshape(c, h, w)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        c, h, w = x.shape
        s = self.scale
        if h % s != 0 or w % s != 0:
            raise ShapeError(f"spatial size {h}x{w} not divisible by scale {s}")
        off = s // 2
        return self.blur(x)[:, off::s, off::s]


def degrade(
    x: HyperCube,
    kernel: BlurKernel,
    s: int,
    channel_chunk: int = 64,
) -> HyperCube:
    """Apply the degradation operator to a cube (chunked over channels)."""
    op = DegradationOperator(kernel, s)
    c, h, w = x.data.shape
    if h % s != 0 or w % s != 0:
        raise ShapeError(f"spatial size {h}x{w} not divisible by scale {s}")
    pieces = []
    with torch.no_grad():
        for lo in range(0, c, channel_chunk):
            t = torch.from_numpy(np.ascontiguousarray(x.data[lo : lo + channel_chunk]))
            pieces.append(op(t).numpy())
    return HyperCube(np.concatenate(pieces, axis=0), band_id=x.band_id, space=x.space)


def add_noise(y: HyperCube, sigma, seed: int) -> HyperCube:
    """Add i.i.d. zero-mean Gaussian noise, deterministic for a given seed.

    ``sigma`` may be a scalar or a per-channel array (broadcast over H, W).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise SpecError("noise sigma must be nonnegative")
    if sigma.ndim == 1:
        if sigma.shape[0] != y.channels:
            raise ShapeError(
                f"per-channel sigma length {sigma.shape[0]} != channels {y.channels}"
            )
        sigma = sigma[:, None, None]
    if np.all(sigma == 0):
        return HyperCube(y.data.copy(), band_id=y.band_id, space=y.space)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(y.data.shape) * sigma
    data = (y.data.astype(np.float64) + noise).astype(y.data.dtype)
    return HyperCube(data, band_id=y.band_id, space=y.space)
