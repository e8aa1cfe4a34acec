"""Command-line entry point.

    s5p-ssr <command> --config <path> [--set key.path=value ...]

Commands: synth-data, prepare, train, evaluate, superresolve, visualize.
Every command writes the normalized config it actually ran with next to its
artifacts and exits 0 only when those artifacts exist.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, validate_config
from .errors import CacheMismatchError, ConfigError
from .hsio import DatasetManifest
from .pipeline import (
    evaluate_models,
    generate_scenes,
    load_scene,
    model_as_callable,
    prepare_dataset,
    superresolve_scene,
    visualize_products,
)
from .training import load_checkpoint, train_band

log = logging.getLogger("s5p_ssr")


def _write_config_copy(run: RunConfig, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config_used.json").write_text(run.to_json())


def cmd_synth_data(run: RunConfig) -> list[Path]:
    spec = run.band_spec()
    scene = run.cfg["scene"]
    scenes_dir = run.workdir / "scenes"
    names = generate_scenes(
        scenes_dir,
        count=int(scene["count"]),
        channels=spec.channels,
        height=int(scene["height"]),
        width=int(scene["width"]),
        seed=scene["seed"],
        smoothness=scene["smoothness"],
        spectral_rank=int(scene["spectral_rank"]),
        band_id=spec.band_id,
    )
    _write_config_copy(run, scenes_dir)
    return [scenes_dir / f"{n}.npy" for n in names]


def cmd_prepare(run: RunConfig) -> list[Path]:
    spec = run.band_spec()
    data = run.cfg["data"]
    cache_root = run.workdir / "cache"
    result = prepare_dataset(
        run.workdir / "scenes",
        spec,
        cache_root,
        modes=tuple(data["modes"]),
        along_crop=int(data["along_crop"]),
        polar_fraction=data["polar_fraction"],
        clean_threshold=data["clean_threshold"],
        fractions=tuple(data["fractions"]),
        split_seed=data["split_seed"],
        lr_seed=data["lr_seed"],
        lr_patch=None if data["lr_patch"] is None else int(data["lr_patch"]),
        sigma_override=data["sigma_override"],
        operator_spec=run.named_spec(data["operator_band"]),
        max_patches_per_image=data["max_patches_per_image"],
    )
    _write_config_copy(run, cache_root)
    log.info("caches ready: %s", result["cache"])
    return [cache_root / mode / "cache_hash.json" for mode in data["modes"]]


def _cache_dir_for_setting(run: RunConfig) -> Path:
    mode = "gt_shr" if run.cfg["train"]["setting"] == "ssl_gt_shr" else "lr_hr"
    cache_dir = run.workdir / "cache" / mode
    if not (cache_dir / "cache_hash.json").exists():
        raise ConfigError(f"missing prepared cache {cache_dir}; run `prepare` first")
    return cache_dir


def cmd_train(run: RunConfig) -> list[Path]:
    spec = run.band_spec()
    config = run.train_config(spec)
    cache_dir = _cache_dir_for_setting(run)
    run_dir = run.workdir / "runs" / run.run_name()
    operator_spec = run.named_spec(config.operator_band)
    best, history = train_band(config, cache_dir, run_dir, spec,
                               operator_spec=operator_spec)
    _write_config_copy(run, run_dir)
    log.info("trained %d epochs; best checkpoint %s", len(history), best)
    return [best, run_dir / "last.pt", run_dir / "history.jsonl"]


def cmd_evaluate(run: RunConfig) -> list[Path]:
    spec = run.band_spec()
    cache_dir = _cache_dir_for_setting(run)
    ckpt = run.cfg["evaluate"]["checkpoint"]
    ckpt = Path(ckpt) if ckpt else run.workdir / "runs" / run.run_name() / "best.pt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}; run `train` first")
    model, payload = load_checkpoint(ckpt, spec)
    operator_spec = run.named_spec(payload["train_config"].get("operator_band"))
    report = evaluate_models(
        {run.run_name(): model_as_callable(model)},
        cache_dir, spec, split=run.cfg["evaluate"]["split"],
        operator_spec=operator_spec,
    )
    reports_dir = run.workdir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    out = reports_dir / f"{run.run_name()}_{run.cfg['evaluate']['split']}.csv"
    report.write_csv(out)
    _write_config_copy(run, reports_dir)
    for model_id in report.model_ids():
        log.info("%s: %s", model_id, report.aggregate(model_id))
    return [out]


def _pick_scene(run: RunConfig) -> str:
    name = run.cfg["superresolve"]["scene"]
    if name:
        return name
    mode = "gt_shr" if run.cfg["train"]["setting"] == "ssl_gt_shr" else "lr_hr"
    manifest_path = run.workdir / "cache" / mode / "manifest.json"
    if manifest_path.exists():
        test_ids = DatasetManifest.load(manifest_path).ids("test")
        if test_ids:
            return test_ids[0].split(":")[0]
    scenes = sorted((run.workdir / "scenes").glob("scene_*.npy"))
    if not scenes:
        raise ConfigError("no scene available; pass superresolve.scene")
    return scenes[0].stem


def cmd_superresolve(run: RunConfig) -> list[Path]:
    from .hsio import ChannelStats

    spec = run.band_spec()
    ckpt = run.cfg["superresolve"]["checkpoint"]
    ckpt = Path(ckpt) if ckpt else run.workdir / "runs" / run.run_name() / "best.pt"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}; run `train` first")
    cache_dir = _cache_dir_for_setting(run)
    stats = ChannelStats.load(cache_dir / "stats.npz")
    model, _ = load_checkpoint(ckpt, spec)
    scene_name = _pick_scene(run)
    scene = load_scene(run.workdir / "scenes", scene_name)
    out_dir = run.workdir / "products" / run.run_name() / scene_name
    superresolve_scene(
        model, scene, stats, spec, out_dir,
        clean_threshold=run.cfg["data"]["clean_threshold"],
        tile=run.cfg["superresolve"]["tile"],
    )
    _write_config_copy(run, out_dir)
    return [out_dir / "shr.npy", out_dir / "a_shr.npy", out_dir / "meta.json"]


def cmd_visualize(run: RunConfig) -> list[Path]:
    product = run.cfg["visualize"]["product"]
    if product:
        product_dir = Path(product)
    else:
        root = run.workdir / "products" / run.run_name()
        candidates = sorted(p for p in root.glob("*") if (p / "meta.json").exists())
        if not candidates:
            raise ConfigError(f"no products under {root}; run `superresolve` first")
        product_dir = candidates[0]
    out_dir = run.workdir / "figures" / run.run_name() / product_dir.name
    written = visualize_products(product_dir, out_dir, run.band_spec().band_id)
    _write_config_copy(run, out_dir)
    return [Path(p) for p in written]


COMMANDS = {
    "synth-data": cmd_synth_data,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "superresolve": cmd_superresolve,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s5p-ssr",
        description="Self-supervised super-resolution for S5P radiance bands",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="YAML config path")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config entry")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run = validate_config(args.config, args.overrides)
        artifacts = COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CacheMismatchError as exc:
        print(f"cache mismatch: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    missing = [str(p) for p in artifacts if not Path(p).exists()]
    if missing:
        print(f"declared artifacts missing: {missing}", file=sys.stderr)
        return 1
    for path in artifacts:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
