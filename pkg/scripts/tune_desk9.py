"""Timing/efficacy probe for the desk-scale acceptance configuration."""

import sys
import time
from pathlib import Path

from s5p_ssr.models import UnetCfg
from s5p_ssr.pipeline import evaluate_models, generate_scenes, model_as_callable, prepare_dataset
from s5p_ssr.sensor import BandSpec
from s5p_ssr.training import TrainConfig, load_checkpoint, train_band

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/desk9b")
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 8

SPEC = BandSpec("SYN", channels=16, snr_linear=1000.0, mu=2e-5, scale=4, lr_patch=56)
TOY = UnetCfg(encoder_widths=(16, 12, 6, 3), decoder_widths=(3, 6, 12, 16), stage_modules=3)

t0 = time.time()
scenes = ROOT / "scenes"
if not (scenes / "scenes.json").exists():
    generate_scenes(scenes, count=20, channels=16, height=448, width=448, seed=2024,
                    smoothness=4.0, spectral_rank=3)
print(f"scenes {time.time()-t0:.1f}s", flush=True)

t0 = time.time()
prepare_dataset(scenes, SPEC, ROOT / "cache", along_crop=448, polar_fraction=0.0,
                split_seed=0, lr_seed=11, max_patches_per_image=4)
print(f"prepare {time.time()-t0:.1f}s", flush=True)

results = {}
for setting, n_epochs in (("ssl_lr_hr", EPOCHS), ("sl_lr_hr", 40)):
    cfg = TrainConfig(setting=setting, arch="unet800k", band_id="SYN", lr0=2e-3,
                      max_epochs=n_epochs, seed=7, arch_cfg=TOY, eq_margin=4, threads=2)
    t0 = time.time()
    best, hist = train_band(cfg, ROOT / "cache" / "lr_hr", ROOT / f"run_{setting}", SPEC)
    print(f"{setting}: {time.time()-t0:.1f}s for {len(hist)} epochs", flush=True)
    for h in hist:
        print("   ", {k: round(v, 6) if isinstance(v, float) else v for k, v in h.items()}, flush=True)
    model, _ = load_checkpoint(best, SPEC)
    results[setting] = model

t0 = time.time()
cfg = TrainConfig(setting="ssl_gt_shr", arch="unet800k", band_id="SYN", lr0=2e-3,
                  max_epochs=10, seed=7, arch_cfg=TOY, eq_margin=4, threads=2)
best, hist = train_band(cfg, ROOT / "cache" / "gt_shr", ROOT / "run_gt", SPEC)
print(f"gt_shr: {time.time()-t0:.1f}s for {len(hist)} epochs", flush=True)
model, _ = load_checkpoint(best, SPEC)

t0 = time.time()
report = evaluate_models({k: model_as_callable(m) for k, m in results.items()},
                         ROOT / "cache" / "lr_hr", SPEC, split="test")
print(f"evaluate lr_hr {time.time()-t0:.1f}s", flush=True)
for mid in report.model_ids():
    print(mid, {k: round(v, 4) for k, v in report.aggregate(mid).items()}, flush=True)

report_gt = evaluate_models({"shr": model_as_callable(model)},
                            ROOT / "cache" / "gt_shr", SPEC, split="test")
for mid in report_gt.model_ids():
    print("gt:", mid, {k: round(v, 4) for k, v in report_gt.aggregate(mid).items()}, flush=True)
