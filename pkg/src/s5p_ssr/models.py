"""Compact convolutional architectures for band-wise super-resolution.

All four models share a pre-upsampling residual design: the input is first
bicubically interpolated to the target grid and the network predicts only a
residual correction. Two families are provided: encoder-decoder networks
with an inverted channel configuration (feature width shrinks while spatial
resolution drops), and flat recursive refiners. Every convolution is a
depthwise separable pair (per-channel 3x3 spatial filter followed by a 1x1
cross-channel mix); there are no normalization layers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, SpecError
from .sensor import BandSpec

ARCHITECTURES = ("unet800k", "unet1m", "dscr", "dscr_s")

#: Published parameter totals (wide group = 497-channel bands, narrow = 480).
PUBLISHED_PARAM_COUNTS = {
    "unet1m": {"wide": 1.07e6, "narrow": 1.00e6},
    "unet800k": {"wide": 0.81e6, "narrow": 0.79e6},
    "dscr": {"wide": 3.9e6, "narrow": 3.6e6},
    "dscr_s": {"wide": 0.25e6, "narrow": 0.23e6},
}

#: Encoder/decoder width sequences per variant and channel group.
APPENDIX_WIDTHS = {
    "unet800k": {
        "wide": {"encoder": (497, 63, 8, 1), "decoder": (1, 8, 64, 512)},
        "narrow": {"encoder": (480, 60, 8, 1), "decoder": (1, 8, 64, 512)},
    },
    "unet1m": {
        "wide": {"encoder": (497, 180, 65, 24, 9), "decoder": (9, 25, 70, 195, 542)},
        "narrow": {"encoder": (480, 173, 63, 23, 9), "decoder": (9, 25, 70, 195, 542)},
    },
}

#: Decoder modules per stage; the deeper variant uses shallower stages.
UNET_STAGE_MODULES = {"unet800k": 3, "unet1m": 2}


def band_group(channels: int) -> str:
    if channels == 497:
        return "wide"
    if channels == 480:
        return "narrow"
    raise SpecError(f"no published width table for {channels}-channel bands")


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic_weights(frac: torch.Tensor) -> torch.Tensor:
    """Four-tap Catmull-Rom (a = -0.5) weights for fractional offsets."""
    a = -0.5
    t = frac.unsqueeze(-1) + torch.tensor([1.0, 0.0, -1.0, -2.0], dtype=frac.dtype)
    at = t.abs()
    inner = (a + 2) * at**3 - (a + 3) * at**2 + 1
    outer = a * (at**3 - 5 * at**2 + 8 * at - 4)
    return torch.where(at <= 1, inner, torch.where(at < 2, outer, torch.zeros_like(at)))


def _resample_last_axis(x: torch.Tensor, out_len: int) -> torch.Tensor:
    in_len = x.shape[-1]
    if out_len == in_len:
        return x
    coords = (torch.arange(out_len, dtype=x.dtype) + 0.5) * (in_len / out_len) - 0.5
    base = torch.floor(coords)
    wts = _cubic_weights(coords - base)
    taps = base.long().unsqueeze(-1) + torch.arange(-1, 3)
    taps = taps.clamp(0, in_len - 1)  # border samples clamp to the edge
    gathered = x[..., taps.reshape(-1)].reshape(*x.shape[:-1], out_len, 4)
    return (gathered * wts).sum(-1)


def bicubic_resample(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Separable Catmull-Rom resampling of a (C, H, W) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got shape {tuple(x.shape)}")
    out = _resample_last_axis(x, out_w)
    out = _resample_last_axis(out.transpose(-1, -2), out_h).transpose(-1, -2)
    return out.contiguous()


def bicubic_upsample(y: torch.Tensor, s: int) -> torch.Tensor:
    """Upscale spatially by an integer factor; exact on constants, s=1 is
    the identity."""
    if s < 1:
        raise SpecError(f"scale must be >= 1, got {s}")
    if s == 1:
        return y
    _, h, w = y.shape
    return bicubic_resample(y, s * h, s * w)


# ---------------------------------------------------------------------------
# depthwise separable building blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DscBlockCfg:
    in_channels: int
    out_channels: int
    kernel: int = 3
    depth: int = 1

    def __post_init__(self):
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise SpecError(f"kernel must be odd and positive, got {self.kernel}")
        if self.depth < 1:
            raise SpecError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError("channel counts must be positive")


def _init_conv(conv: nn.Conv2d) -> nn.Conv2d:
    """Variance-scaling fan-in init; keeps activation scale through depth."""
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    return conv


class DscModule(nn.Module):
    """Depthwise 3x3 (edge-replicated borders) followed by a 1x1 mix."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise SpecError(f"kernel must be odd, got {kernel}")
        self.depthwise = _init_conv(nn.Conv2d(
            in_channels, in_channels, kernel,
            padding=kernel // 2, groups=in_channels, padding_mode="replicate",
        ))
        self.pointwise = _init_conv(nn.Conv2d(in_channels, out_channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.depthwise.in_channels:
            raise ShapeError(
                f"expected {self.depthwise.in_channels} channels, got {x.shape[1]}"
            )
        return self.pointwise(self.depthwise(x))


class DscBlock(nn.Module):
    """``depth`` successive DSC modules; the first changes the width."""

    def __init__(self, cfg: DscBlockCfg, activation: bool = True):
        super().__init__()
        self.cfg = cfg
        mods = [DscModule(cfg.in_channels, cfg.out_channels, cfg.kernel)]
        mods += [
            DscModule(cfg.out_channels, cfg.out_channels, cfg.kernel)
            for _ in range(cfg.depth - 1)
        ]
        self.modules_ = nn.ModuleList(mods)
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for mod in self.modules_:
            x = mod(x)
            if self.activation:
                x = F.relu(x)
        return x


# ---------------------------------------------------------------------------
# encoder-decoder variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnetCfg:
    encoder_widths: tuple  # first entry = input channel count C
    decoder_widths: tuple  # first entry = bottom width
    block_depth: int = 2   # encoder DSC modules per block
    stage_modules: int = 2  # decoder DSC modules per stage (after fusion)
    kernel: int = 3
    skip_fusion: str = "concat_project"

    def __post_init__(self):
        enc, dec = tuple(self.encoder_widths), tuple(self.decoder_widths)
        if len(enc) < 2 or len(dec) != len(enc):
            raise SpecError("encoder/decoder width lists must match and define >= 1 level")
        if list(enc) != sorted(enc, reverse=True) or len(set(enc)) != len(enc):
            raise SpecError("encoder widths must be strictly decreasing")
        if list(dec) != sorted(dec) or len(set(dec)) != len(dec):
            raise SpecError("decoder widths must be strictly increasing")
        if dec[0] != enc[-1]:
            raise SpecError("decoder must start at the encoder's bottom width")
        if self.skip_fusion != "concat_project":
            raise SpecError(f"unsupported skip fusion {self.skip_fusion!r}")
        if self.stage_modules < 2:
            raise SpecError("decoder stages need at least 2 DSC modules")

    @property
    def levels(self) -> int:
        return len(self.encoder_widths) - 1


def _fusion_width(target: int) -> int:
    return max(1, target // 2)


class _DecoderStage(nn.Module):
    """Nearest x2 upsample, skip concat, pointwise fuse to a compact width,
    then DSC modules expanding to the stage's output width."""

    def __init__(self, prev: int, skip: int, target: int, n_modules: int, kernel: int):
        super().__init__()
        fused = _fusion_width(target)
        self.project = _init_conv(nn.Conv2d(prev + skip, fused, 1))
        mods = [DscModule(fused, fused, kernel) for _ in range(n_modules - 2)]
        mods.append(DscModule(fused, target, kernel))
        mods.append(DscModule(target, target, kernel))
        self.modules_ = nn.ModuleList(mods)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.project(torch.cat([x, skip], dim=1)))
        for mod in self.modules_:
            x = F.relu(mod(x))
        return x


class UnetS5P(nn.Module):
    """Encoder-decoder refiner over the bicubic baseline.

    The encoder halves the spatial size per level while shrinking feature
    width; the decoder mirrors it with skip fusion. A zero-initialized
    pointwise head maps the last decoder width back to the band's channel
    count, so an untrained model reproduces bicubic interpolation exactly.
    """

    def __init__(self, cfg: UnetCfg, scale: int = 4):
        super().__init__()
        self.cfg = cfg
        self.scale = scale
        enc, dec = cfg.encoder_widths, cfg.decoder_widths
        self.enc_blocks = nn.ModuleList(
            DscBlock(DscBlockCfg(enc[i], enc[i + 1], cfg.kernel, cfg.block_depth))
            for i in range(cfg.levels)
        )
        skips = list(enc[1:])  # widths of encoder block outputs, shallow->deep
        stages = []
        prev = dec[0]
        for i, target in enumerate(dec[1:]):
            skip_w = skips[len(skips) - 1 - i]
            stages.append(_DecoderStage(prev, skip_w, target, cfg.stage_modules, cfg.kernel))
            prev = target
        self.dec_stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(dec[-1], enc[0], 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def residual(self, up: torch.Tensor) -> torch.Tensor:
        x = up.unsqueeze(0)
        skips = []
        for block in self.enc_blocks:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        for stage, skip in zip(self.dec_stages, reversed(skips)):
            x = stage(x, skip)
        return self.head(x).squeeze(0)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 3:
            raise ShapeError(f"expected (C, H, W), got shape {tuple(y.shape)}")
        if y.shape[0] != self.cfg.encoder_widths[0]:
            raise ShapeError(
                f"expected {self.cfg.encoder_widths[0]} channels, got {y.shape[0]}"
            )
        up = bicubic_upsample(y, self.scale)
        mult = 2**self.cfg.levels
        if up.shape[1] % mult or up.shape[2] % mult:
            raise ShapeError(
                f"upsampled size {tuple(up.shape[1:])} must be divisible by {mult}"
            )
        return up + self.residual(up)


# ---------------------------------------------------------------------------
# recursive variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DscrCfg:
    channels: int
    blocks: int = 5
    modules_per_block: int = 3
    kernel: int = 3
    activation: bool = True
    share_blocks: bool = False


class DscrNet(nn.Module):
    """Flat recursive refiner: blocks of DSC modules at constant width.

    Rectifier activations sit after every module except the last one (the
    final activation is removed), and the last pointwise convolution is the
    zero-initialized residual head.
    """

    def __init__(self, cfg: DscrCfg, scale: int = 4):
        super().__init__()
        self.cfg = cfg
        self.scale = scale
        if cfg.share_blocks:
            shared = nn.ModuleList(
                DscModule(cfg.channels, cfg.channels, cfg.kernel)
                for _ in range(cfg.modules_per_block)
            )
            self.blocks = nn.ModuleList([shared] * cfg.blocks)
        else:
            self.blocks = nn.ModuleList(
                nn.ModuleList(
                    DscModule(cfg.channels, cfg.channels, cfg.kernel)
                    for _ in range(cfg.modules_per_block)
                )
                for _ in range(cfg.blocks)
            )
        self.head = self.blocks[-1][-1].pointwise
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def residual(self, up: torch.Tensor) -> torch.Tensor:
        x = up.unsqueeze(0)
        n_mods = self.cfg.blocks * self.cfg.modules_per_block
        i = 0
        for block in self.blocks:
            for mod in block:
                x = mod(x)
                i += 1
                if self.cfg.activation and i < n_mods:
                    x = F.relu(x)
        return x.squeeze(0)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 3:
            raise ShapeError(f"expected (C, H, W), got shape {tuple(y.shape)}")
        if y.shape[0] != self.cfg.channels:
            raise ShapeError(f"expected {self.cfg.channels} channels, got {y.shape[0]}")
        up = bicubic_upsample(y, self.scale)
        return up + self.residual(up)


# ---------------------------------------------------------------------------
# factory / accounting
# ---------------------------------------------------------------------------

def unet_cfg_for(arch: str, channels: int) -> UnetCfg:
    group = band_group(channels)
    widths = APPENDIX_WIDTHS[arch][group]
    return UnetCfg(
        encoder_widths=widths["encoder"],
        decoder_widths=widths["decoder"],
        stage_modules=UNET_STAGE_MODULES[arch],
    )


def dscr_cfg_for(arch: str, channels: int) -> DscrCfg:
    if arch == "dscr":
        return DscrCfg(channels=channels)
    return DscrCfg(channels=channels, blocks=1, modules_per_block=1, activation=False)


def build_model(arch: str, spec: BandSpec, cfg=None, seed: int | None = None) -> nn.Module:
    """Instantiate an architecture for a band; ``cfg`` overrides the shipped
    width tables (used for toy-width experiments)."""
    if arch not in ARCHITECTURES:
        raise SpecError(f"unknown architecture {arch!r}; choose from {ARCHITECTURES}")
    if seed is not None:
        torch.manual_seed(seed)
    if arch in ("unet800k", "unet1m"):
        cfg = cfg or unet_cfg_for(arch, spec.channels)
        if cfg.encoder_widths[0] != spec.channels:
            raise SpecError("encoder input width must equal the band's channel count")
        return UnetS5P(cfg, scale=spec.scale)
    cfg = cfg or dscr_cfg_for(arch, spec.channels)
    if cfg.channels != spec.channels:
        raise SpecError("dscr width must equal the band's channel count")
    return DscrNet(cfg, scale=spec.scale)


def count_params(arch: str, channels: int, cfg=None, scale: int = 4) -> int:
    """Exact learnable-parameter count for an architecture/band pairing."""
    spec = BandSpec("COUNT", channels, 1.0, 1.0, scale=scale, lr_patch=4)
    model = build_model(arch, spec, cfg=cfg)
    seen, total = set(), 0
    for p in model.parameters():
        if id(p) not in seen:  # shared blocks count once
            seen.add(id(p))
            total += p.numel()
    return total


def config_fingerprint(arch: str, cfg, scale: int, band_id: str) -> str:
    payload = {"arch": arch, "scale": scale, "band_id": band_id, "cfg": asdict(cfg)}
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def model_config(model: nn.Module):
    return model.cfg


def zero_residual_(model: nn.Module) -> nn.Module:
    """Zero the final residual projection so the model is exactly bicubic."""
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model
