"""Band-wise training orchestration.

Three settings share one loop: supervised LR->HR (MSE against the reference),
self-supervised LR->HR (combined risk-estimate + equivariance objective on
measurements alone), and self-supervised GT->SHR where native-resolution
images are treated as the measurements. The low-resolution simulation is
generated once per manifest under a frozen seed and cached; re-running
verifies the cache hash instead of regenerating, so every model consumes
bit-identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CacheMismatchError, ConfigError, ShapeError
from .hsio import ChannelStats, DatasetManifest, normalize
from .losses import EqCfg, SureCfg, mse_loss, ssl_total
from .models import (
    DscrCfg,
    UnetCfg,
    build_model,
    config_fingerprint,
    model_config,
)
from .sensor import (
    NORMALIZED,
    BandSpec,
    DegradationOperator,
    HyperCube,
    add_noise,
    degrade,
    make_blur_kernel,
)

log = logging.getLogger(__name__)

SETTINGS = ("sl_lr_hr", "ssl_lr_hr", "ssl_gt_shr")
CHECKPOINT_FORMAT = 1


class NonFiniteLossError(RuntimeError):
    """Training aborted on a non-finite loss; diagnostics were dumped."""


def derive_seed(*parts) -> int:
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


# ---------------------------------------------------------------------------
# frozen LR simulation cache
# ---------------------------------------------------------------------------

def _patch_stem(image_id: str, row: int, col: int) -> str:
    return f"{image_id.replace('/', '_')}__r{row:05d}_c{col:05d}"


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def simulate_lr_dataset(
    manifest: DatasetManifest,
    spec: BandSpec,
    hr_patches: dict,
    stats: ChannelStats,
    cache_dir,
    mode: str = "lr_hr",
    sigma_override: float | None = None,
    kernel=None,
) -> str:
    """Write (or verify) the frozen patch cache; returns the cache hash.

    ``hr_patches`` maps ``(image_id, row, col)`` to raw-space patches listed
    in the manifest. In ``lr_hr`` mode each entry stores the simulated
    measurement and its reference; in ``gt_shr`` mode the patch itself is the
    measurement and no reference is stored. Arrays are normalized float32.
    """
    if mode not in ("lr_hr", "gt_shr"):
        raise ConfigError(f"unknown cache mode {mode!r}")
    cache_dir = Path(cache_dir)
    kernel = kernel or make_blur_kernel(spec)
    sigma_raw = spec.sigma if sigma_override is None else sigma_override
    config_blob = json.dumps(
        {
            "mode": mode,
            "manifest": manifest.hash,
            "stats": stats.hash,
            "sigma_raw": sigma_raw,
            "scale": spec.scale,
            "blur": [kernel.sigma_along, kernel.sigma_cross],
            "lr_seed": manifest.lr_seed,
        },
        sort_keys=True,
    )
    hash_file = cache_dir / "cache_hash.json"
    if hash_file.exists():
        recorded = json.loads(hash_file.read_text())
        if recorded["config"] != config_blob:
            raise CacheMismatchError(
                f"{cache_dir}: cache was built from a different configuration"
            )
        for name, digest in recorded["files"].items():
            path = cache_dir / "patches" / name
            if not path.exists() or _file_sha256(path) != digest:
                raise CacheMismatchError(f"{cache_dir}: {name} missing or corrupted")
        log.info("cache %s verified (%d patches)", cache_dir, len(recorded["files"]))
        return recorded["hash"]

    patches_dir = cache_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for image_id, row, col, size in manifest.patches:
        hr = hr_patches[(image_id, row, col)]
        stem = _patch_stem(image_id, row, col)
        if mode == "lr_hr":
            lr = degrade(hr, kernel, spec.scale)
            lr = add_noise(lr, sigma_raw, derive_seed(manifest.lr_seed, image_id, row, col))
            arrays = {
                "lr": normalize(lr, stats).data.astype(np.float32),
                "hr": normalize(hr, stats).data.astype(np.float32),
            }
        else:
            arrays = {"lr": normalize(hr, stats).data.astype(np.float32)}
        for key, arr in arrays.items():
            path = patches_dir / f"{stem}.{key}.npy"
            np.save(path, arr)
            files[path.name] = _file_sha256(path)

    total = hashlib.sha256(config_blob.encode())
    for name in sorted(files):
        total.update(name.encode())
        total.update(files[name].encode())
    cache_hash = total.hexdigest()[:16]
    hash_file.write_text(
        json.dumps({"hash": cache_hash, "config": config_blob, "files": files}, indent=2)
    )
    return cache_hash


class PatchDataset:
    """Read access to a frozen cache for one split."""

    def __init__(self, cache_dir, manifest: DatasetManifest, split: str, band_id: str):
        self.dir = Path(cache_dir) / "patches"
        self.band_id = band_id
        self.entries = [
            _patch_stem(image_id, row, col)
            for image_id, row, col, _ in manifest.patches_for(split)
        ]

    def __len__(self):
        return len(self.entries)

    def load(self, idx: int) -> dict:
        stem = self.entries[idx]
        out = {"id": stem}
        lr = np.load(self.dir / f"{stem}.lr.npy")
        out["lr"] = torch.from_numpy(lr)
        hr_path = self.dir / f"{stem}.hr.npy"
        if hr_path.exists():
            out["hr"] = torch.from_numpy(np.load(hr_path))
        return out


def cache_hash(cache_dir) -> str:
    return json.loads((Path(cache_dir) / "cache_hash.json").read_text())["hash"]


# ---------------------------------------------------------------------------
# training configuration and checkpointing
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    setting: str
    arch: str
    band_id: str
    lr0: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    batch_size: int = 1
    max_epochs: int = 50
    min_lr: float = 1e-6
    seed: int = 0
    sure_sigma: float | None = None  # None -> derived from band metadata
    mc_probes: int = 1
    mc_step: float = 1e-3
    probe_dist: str = "rademacher"
    eq_factor: float = 2.0
    eq_lam: float = 1.0
    eq_margin: int = 0
    operator_band: str | None = None  # diagnostic: cross-band operator swap
    snr_override: float | None = None  # diagnostic: noise matched to another band
    threads: int = 1
    arch_cfg: object = None  # UnetCfg/DscrCfg override for toy widths

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if self.batch_size < 1 or self.plateau_patience < 1:
            raise ConfigError("batch_size and plateau_patience must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch_cfg"] = None if self.arch_cfg is None else asdict(self.arch_cfg)
        return d


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience``
    consecutive epochs without validation improvement."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 3):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = float("inf")
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                for group in self.optimizer.param_groups:
                    group["lr"] *= self.factor
                self.bad_epochs = 0
        return self.lr


def state_dict_hash(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model, optimizer, epoch, best_val, config: TrainConfig,
                    manifest_hash: str, stats_hash: str):
    cfg = model_config(model)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "arch": config.arch,
        "band_id": config.band_id,
        "cfg_kind": type(cfg).__name__,
        "cfg": asdict(cfg),
        "scale": model.scale,
        "fingerprint": config_fingerprint(config.arch, cfg, model.scale, config.band_id),
        "manifest_hash": manifest_hash,
        "stats_hash": stats_hash,
        "epoch": epoch,
        "best_val": best_val,
        "train_config": config.to_dict(),
        "model_state": model.state_dict(),
        "optim_state": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)  # atomic publish
    return payload["fingerprint"]


def _cfg_from_payload(payload: dict):
    raw = dict(payload["cfg"])
    if payload["cfg_kind"] == "UnetCfg":
        raw["encoder_widths"] = tuple(raw["encoder_widths"])
        raw["decoder_widths"] = tuple(raw["decoder_widths"])
        return UnetCfg(**raw)
    return DscrCfg(**raw)


def load_checkpoint(path, spec: BandSpec):
    """Rebuild the model recorded in a checkpoint; returns (model, payload)."""
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format in {path}")
    cfg = _cfg_from_payload(payload)
    model = build_model(payload["arch"], spec, cfg=cfg)
    model.load_state_dict(payload["model_state"])
    return model, payload


def checkpoint_hash(path) -> str:
    payload = torch.load(path, weights_only=False)
    return state_dict_hash(payload["model_state"])


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _resolve_sigma(config: TrainConfig, spec: BandSpec, stats: ChannelStats) -> float:
    if config.sure_sigma is not None:
        return config.sure_sigma
    sigma_raw = spec.sigma if config.snr_override is None else spec.mu / config.snr_override
    # Channel-wise normalization rescales the noise by each channel's std;
    # the scalar risk term uses the mean normalized level.
    return float(np.mean(sigma_raw / stats.std))


def _loss_for(config, model, batch, operator, sure_cfg, eq_cfg, seed):
    if config.setting == "sl_lr_hr":
        if "hr" not in batch:
            raise ConfigError("sl_lr_hr needs (lr, hr) pairs in the cache")
        loss = mse_loss(model(batch["lr"]), batch["hr"])
        return loss, {"total": float(loss.detach())}
    total, parts = ssl_total(model, batch["lr"], operator, sure_cfg, eq_cfg, seed)
    return total, parts


def train_band(
    config: TrainConfig,
    cache_dir,
    run_dir,
    spec: BandSpec,
    operator_spec: BandSpec | None = None,
    resume_from=None,
):
    """Train one model for one band; returns (best_path, history).

    The run directory receives the exact config, per-epoch history lines,
    per-step loss terms, and last/best checkpoints. Identical configs and
    seeds reproduce identical checkpoints on one platform.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir)
    manifest = DatasetManifest.load(cache_dir / "manifest.json")
    stats = ChannelStats.load(cache_dir / "stats.npz")

    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)

    train_set = PatchDataset(cache_dir, manifest, "train", config.band_id)
    val_set = PatchDataset(cache_dir, manifest, "val", config.band_id)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("cache has no train or no val patches")

    # The operator swap (cross-band diagnostic) changes only the blur kernel;
    # the noise level stays the data band's unless snr_override matches it
    # to another band.
    op_spec = operator_spec if operator_spec is not None else spec
    operator = DegradationOperator(make_blur_kernel(op_spec), op_spec.scale)
    sure_cfg = SureCfg(
        sigma=_resolve_sigma(config, spec, stats),
        mc_probes=config.mc_probes,
        mc_step=config.mc_step,
        probe_dist=config.probe_dist,
    )
    eq_cfg = EqCfg(factor=config.eq_factor, lam=config.eq_lam, margin=config.eq_margin)

    model = build_model(config.arch, spec, cfg=config.arch_cfg, seed=config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr0,
                                 betas=(0.9, 0.999), eps=1e-8)
    scheduler = PlateauScheduler(optimizer, config.plateau_factor, config.plateau_patience)
    start_epoch = 0
    best_val = float("inf")
    if resume_from is not None:
        _, payload = load_checkpoint(resume_from, spec)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optim_state"])
        start_epoch = payload["epoch"] + 1
        best_val = payload["best_val"]
        scheduler.best = best_val

    (run_dir / "config.json").write_text(json.dumps(
        {"train": config.to_dict(), "manifest_hash": manifest.hash,
         "stats_hash": stats.hash, "cache_hash": cache_hash(cache_dir)},
        indent=2, sort_keys=True))

    history = []
    history_file = run_dir / "history.jsonl"
    steps_file = run_dir / "steps.jsonl"
    best_path = run_dir / "best.pt"
    last_path = run_dir / "last.pt"

    with history_file.open("a") as hist_fh, steps_file.open("a") as steps_fh:
        for epoch in range(start_epoch, config.max_epochs):
            order_rng = np.random.default_rng(derive_seed(config.seed, "order", epoch))
            order = order_rng.permutation(len(train_set))
            model.train()
            train_losses = []
            first_step_loss = None
            for step, idx in enumerate(order):
                batch = train_set.load(int(idx))
                step_seed = derive_seed(config.seed, "step", epoch, step)
                loss, parts = _loss_for(config, model, batch, operator,
                                        sure_cfg, eq_cfg, step_seed)
                if not torch.isfinite(loss):
                    dump = run_dir / f"diagnostic_e{epoch}_s{step}.npz"
                    np.savez(dump, **{k: v.numpy() for k, v in batch.items()
                                      if isinstance(v, torch.Tensor)})
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} step {step}; batch in {dump}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                value = float(loss.detach())
                train_losses.append(value)
                if first_step_loss is None:
                    first_step_loss = value
                steps_fh.write(json.dumps(
                    {"epoch": epoch, "step": step, **parts}) + "\n")

            model.eval()
            val_losses = []
            with torch.no_grad():
                for idx in range(len(val_set)):
                    batch = val_set.load(idx)
                    val_seed = derive_seed(config.seed, "val", idx)
                    loss, _ = _loss_for(config, model, batch, operator,
                                        sure_cfg, eq_cfg, val_seed)
                    val_losses.append(float(loss))
            train_loss = float(np.mean(train_losses))
            val_loss = float(np.mean(val_losses))
            lr_now = scheduler.lr
            entry = {
                "epoch": epoch,
                "lr": lr_now,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "first_step_loss": first_step_loss,
            }
            history.append(entry)
            hist_fh.write(json.dumps(entry) + "\n")
            hist_fh.flush()

            save_checkpoint(last_path, model, optimizer, epoch, best_val, config,
                            manifest.hash, stats.hash)
            if val_loss < best_val:
                best_val = val_loss
                save_checkpoint(best_path, model, optimizer, epoch, best_val, config,
                                manifest.hash, stats.hash)

            new_lr = scheduler.step(val_loss)
            if new_lr < config.min_lr:
                log.info("early stop: lr %.2e below %.2e", new_lr, config.min_lr)
                break

    if not best_path.exists():  # every epoch failed to improve -inf baseline
        save_checkpoint(best_path, model, optimizer, start_epoch, best_val, config,
                        manifest.hash, stats.hash)
    return best_path, history


# ---------------------------------------------------------------------------
# tiled inference
# ---------------------------------------------------------------------------

def _tile_positions(length: int, tile: int, step: int):
    if tile >= length:
        return [0]
    positions = list(range(0, length - tile + 1, step))
    if positions[-1] != length - tile:
        positions.append(length - tile)
    return positions


def _owned_ranges(positions, tile: int, length: int):
    bounds = [0]
    for prev, nxt in zip(positions, positions[1:]):
        bounds.append((nxt + prev + tile) // 2)
    bounds.append(length)
    return [(bounds[i], bounds[i + 1]) for i in range(len(positions))]


def infer_shr(model, cube: HyperCube, tile: int | None = None,
              overlap_hr: int = 16) -> HyperCube:
    """Super-resolve a full cube by tiling with overlap-discard blending.

    Tiles overlap by ``overlap_hr`` output pixels; each output pixel is taken
    from the tile whose interior owns it (half the overlap per side), which
    keeps the assembly deterministic and seam-testable.
    """
    cube.require_space(NORMALIZED, "infer_shr")
    scale = model.scale
    c, h, w = cube.shape
    tile = min(tile or min(h, w), h, w)
    ov_lr = max(overlap_hr // scale, 1) if tile < max(h, w) else 0
    if tile <= ov_lr:
        raise ShapeError(f"tile {tile} must exceed the overlap {ov_lr}")
    step = tile - ov_lr if ov_lr else tile
    rows = _tile_positions(h, tile, step)
    cols = _tile_positions(w, tile, step)
    own_rows = _owned_ranges(rows, tile, h)
    own_cols = _owned_ranges(cols, tile, w)

    dtype = next(model.parameters()).dtype
    data = torch.from_numpy(cube.data).to(dtype)
    out = torch.zeros((c, scale * h, scale * w), dtype=dtype)
    model.eval()
    with torch.no_grad():
        for r0, (ra, rb) in zip(rows, own_rows):
            for c0, (ca, cb) in zip(cols, own_cols):
                sr = model(data[:, r0 : r0 + tile, c0 : c0 + tile])
                out[:, scale * ra : scale * rb, scale * ca : scale * cb] = sr[
                    :,
                    scale * (ra - r0) : scale * (rb - r0),
                    scale * (ca - c0) : scale * (cb - c0),
                ]
    return HyperCube(out.numpy(), band_id=cube.band_id, space=NORMALIZED)
