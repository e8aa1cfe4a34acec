"""Run configuration: strict schema, defaults, and normalization.

Configs are YAML mappings validated against a closed schema: unknown keys
are fatal so typos cannot silently change a comparison. Defaults carry the
shipped band metadata and the reference training setup (scale 4, cleaning
threshold 1e-2, 65/20/15 splits, lr0 1e-3 with 0.1 plateau factor and
patience 3, equivariance weight 1).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .models import ARCHITECTURES, DscrCfg, UnetCfg, dscr_cfg_for, unet_cfg_for
from .sensor import BandSpec, load_band_specs
from .training import SETTINGS, TrainConfig

_MISSING = object()


def _positive(x):
    return x is None or (isinstance(x, (int, float)) and x > 0)


def _nonnegative(x):
    return x is None or (isinstance(x, (int, float)) and x >= 0)


def _fractions(x):
    return (
        isinstance(x, (list, tuple))
        and len(x) == 3
        and all(isinstance(v, (int, float)) and v >= 0 for v in x)
        and abs(sum(x) - 1.0) <= 1e-9
    )


#: schema leaves are (default, predicate or None)
SCHEMA = {
    "band": {
        "id": ("SYN", None),
        "channels": (None, _positive),
        "snr_linear": (None, _positive),
        "mu": (None, _positive),
        "blur_sigma_along": (None, _positive),
        "blur_sigma_cross": (None, _positive),
        "scale": (None, _positive),
        "lr_patch": (None, _positive),
    },
    "paths": {
        "workdir": ("work", None),
    },
    "scene": {
        "count": (20, _positive),
        "height": (448, _positive),
        "width": (448, _positive),
        "seed": (0, None),
        "smoothness": (4.0, _positive),
        "spectral_rank": (3, _positive),
    },
    "data": {
        "along_crop": (512, _positive),
        "polar_fraction": (0.05, _nonnegative),
        "clean_threshold": (1e-2, _positive),
        "fractions": ([0.65, 0.20, 0.15], _fractions),
        "split_seed": (0, None),
        "lr_seed": (None, None),
        "modes": (["lr_hr", "gt_shr"], None),
        "lr_patch": (None, _positive),
        "sigma_override": (None, _nonnegative),
        "operator_band": (None, None),
        "max_patches_per_image": (None, _positive),
    },
    "train": {
        "setting": ("ssl_lr_hr", lambda s: s in SETTINGS),
        "arch": ("unet800k", lambda a: a in ARCHITECTURES),
        "run_name": (None, None),
        "lr0": (1e-3, _positive),
        "plateau_factor": (0.1, _positive),
        "plateau_patience": (3, _positive),
        "batch_size": (1, _positive),
        "max_epochs": (50, _positive),
        "min_lr": (1e-6, _positive),
        "seed": (0, None),
        "sure_sigma": (None, _nonnegative),
        "mc_probes": (1, _positive),
        "mc_step": (1e-3, _positive),
        "probe_dist": ("rademacher", lambda p: p in ("rademacher", "gaussian")),
        "eq_factor": (2.0, lambda v: isinstance(v, (int, float)) and v > 1),
        "eq_lam": (1.0, _nonnegative),
        "eq_margin": (0, _nonnegative),
        "snr_override": (None, _positive),
        "operator_band": (None, None),
        "threads": (1, _positive),
        "arch_widths": {
            "encoder": (None, None),
            "decoder": (None, None),
            "stage_modules": (None, _positive),
            "block_depth": (None, _positive),
            "blocks": (None, _positive),
            "modules_per_block": (None, _positive),
        },
    },
    "evaluate": {
        "split": ("test", lambda s: s in ("train", "val", "test")),
        "checkpoint": (None, None),
    },
    "superresolve": {
        "checkpoint": (None, None),
        "scene": (None, None),
        "tile": (None, _positive),
    },
    "visualize": {
        "product": (None, None),
    },
}


def _validate_section(user: dict, schema: dict, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    out = {}
    for key, value in user.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
    for key, entry in schema.items():
        given = user.get(key, _MISSING)
        if isinstance(entry, dict):
            out[key] = _validate_section(
                {} if given is _MISSING else given, entry, f"{path}{key}."
            )
            continue
        default, check = entry
        value = copy.deepcopy(default) if given is _MISSING else given
        if check is not None and value is not None and not check(value):
            raise ConfigError(f"invalid value for {path + key!r}: {value!r}")
        out[key] = value
    return out


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``--set a.b.c=value`` pairs onto the raw mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, text = item.split("=", 1)
        value = yaml.safe_load(text)
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a scalar")
        node[parts[-1]] = value
    return raw


@dataclass
class RunConfig:
    """A fully normalized configuration plus derived helpers."""

    cfg: dict
    source: str = "<memory>"

    @property
    def workdir(self) -> Path:
        return Path(self.cfg["paths"]["workdir"])

    def band_spec(self) -> BandSpec:
        band = self.cfg["band"]
        shipped = load_band_specs()
        base = shipped.get(band["id"])
        fields = {}
        for name in ("channels", "snr_linear", "mu", "blur_sigma_along",
                     "blur_sigma_cross", "scale", "lr_patch"):
            value = band[name]
            if value is None and base is not None:
                value = getattr(base, name)
            if value is None:
                # Synthetic bands fall back to reference-band conventions.
                value = {"blur_sigma_along": 1.5, "blur_sigma_cross": 1.0,
                         "scale": 4}.get(name)
            if value is None:
                raise ConfigError(f"band.{name} is required for band {band['id']!r}")
            fields[name] = value
        fields["channels"] = int(fields["channels"])
        fields["scale"] = int(fields["scale"])
        fields["lr_patch"] = int(fields["lr_patch"])
        return BandSpec(band_id=band["id"], **fields)

    def named_spec(self, band_id: str | None) -> BandSpec | None:
        if band_id is None:
            return None
        shipped = load_band_specs()
        if band_id not in shipped:
            raise ConfigError(f"unknown operator band {band_id!r}")
        return shipped[band_id]

    def arch_cfg(self, spec: BandSpec):
        train = self.cfg["train"]
        widths = train["arch_widths"]
        arch = train["arch"]
        if arch in ("unet800k", "unet1m"):
            if widths["encoder"] is None and widths["decoder"] is None:
                try:
                    return unet_cfg_for(arch, spec.channels)
                except Exception as exc:
                    raise ConfigError(
                        f"band {spec.band_id!r} has no shipped widths for {arch}; "
                        "set train.arch_widths"
                    ) from exc
            if widths["encoder"] is None or widths["decoder"] is None:
                raise ConfigError("arch_widths needs both encoder and decoder")
            return UnetCfg(
                encoder_widths=tuple(widths["encoder"]),
                decoder_widths=tuple(widths["decoder"]),
                stage_modules=widths["stage_modules"] or 2,
                block_depth=widths["block_depth"] or 2,
            )
        base = dscr_cfg_for(arch, spec.channels)
        blocks = widths["blocks"] or base.blocks
        modules = widths["modules_per_block"] or base.modules_per_block
        return DscrCfg(channels=spec.channels, blocks=blocks,
                       modules_per_block=modules, activation=base.activation)

    def run_name(self) -> str:
        train = self.cfg["train"]
        return train["run_name"] or f"{train['setting']}_{train['arch']}"

    def train_config(self, spec: BandSpec) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(
            setting=t["setting"],
            arch=t["arch"],
            band_id=spec.band_id,
            lr0=t["lr0"],
            plateau_factor=t["plateau_factor"],
            plateau_patience=int(t["plateau_patience"]),
            batch_size=int(t["batch_size"]),
            max_epochs=int(t["max_epochs"]),
            min_lr=t["min_lr"],
            seed=t["seed"],
            sure_sigma=t["sure_sigma"],
            mc_probes=int(t["mc_probes"]),
            mc_step=t["mc_step"],
            probe_dist=t["probe_dist"],
            eq_factor=t["eq_factor"],
            eq_lam=t["eq_lam"],
            eq_margin=int(t["eq_margin"]),
            snr_override=t["snr_override"],
            operator_band=t["operator_band"],
            threads=int(t["threads"]),
            arch_cfg=self.arch_cfg(spec),
        )

    def to_json(self) -> str:
        return json.dumps(self.cfg, indent=2, sort_keys=True)


def validate_config(path=None, overrides: list[str] | None = None,
                    raw: dict | None = None) -> RunConfig:
    """Parse, override, and validate a config file into a RunConfig."""
    if raw is None:
        if path is None:
            raw = {}
        else:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = apply_overrides(copy.deepcopy(raw), overrides or [])
    cfg = _validate_section(raw, SCHEMA, "")
    run = RunConfig(cfg=cfg, source=str(path) if path else "<memory>")
    run.band_spec()  # fail fast on unsatisfiable band metadata
    return run
