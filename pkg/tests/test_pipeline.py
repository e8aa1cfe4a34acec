import json

import numpy as np
import pytest

from s5p_ssr.models import UnetCfg, build_model, zero_residual_
from s5p_ssr.pipeline import (
    evaluate_models,
    generate_scenes,
    list_scenes,
    load_scene,
    model_as_callable,
    prepare_dataset,
    save_scene,
    superresolve_scene,
    visualize_products,
)
from s5p_ssr.hsio import ChannelStats, synth_scene
from s5p_ssr.sensor import BandSpec
from s5p_ssr.training import TrainConfig, train_band

SPEC = BandSpec("SYN", channels=4, snr_linear=900.0, mu=2e-5, scale=4, lr_patch=8)
TOY = UnetCfg(encoder_widths=(4, 3, 2), decoder_widths=(2, 4, 8), stage_modules=3)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    generate_scenes(root / "scenes", count=8, channels=4, height=64, width=64,
                    seed=321, smoothness=2.0, spectral_rank=2)
    prepare_dataset(root / "scenes", SPEC, root / "cache", along_crop=64,
                    polar_fraction=0.0, split_seed=0, lr_seed=3)
    return root


class TestSceneIO:
    def test_round_trip(self, tmp_path):
        cube = synth_scene(3, 16, 16, seed=9)
        save_scene(tmp_path, "s", cube)
        back = load_scene(tmp_path, "s")
        assert np.array_equal(back.data, cube.data)
        assert back.space == cube.space
        assert list_scenes(tmp_path) == ["s"]


class TestEvaluate:
    def test_zero_residual_equals_bicubic_row(self, workspace):
        model = zero_residual_(build_model("unet800k", SPEC, cfg=TOY, seed=0))
        report = evaluate_models({"zeroed": model_as_callable(model)},
                                 workspace / "cache" / "lr_hr", SPEC)
        zeroed = report.aggregate("zeroed")
        bicubic = report.aggregate("bicubic")
        assert zeroed == bicubic

    def test_perceptual_hook_is_reported(self, workspace):
        hook_calls = []

        def hook(rec_rgb, ref_rgb):
            assert rec_rgb.shape[-1] == 3 and ref_rgb.shape[-1] == 3
            hook_calls.append(1)
            return float(np.mean(np.abs(rec_rgb - ref_rgb)))

        model = zero_residual_(build_model("unet800k", SPEC, cfg=TOY, seed=0))
        report = evaluate_models({"m": model_as_callable(model)},
                                 workspace / "cache" / "lr_hr", SPEC,
                                 perceptual_hook=hook)
        assert hook_calls
        assert "perceptual" in report.aggregate("m")

    def test_gt_shr_cache_has_only_blind_metrics(self, workspace):
        model = zero_residual_(build_model("unet800k", SPEC, cfg=TOY, seed=0))
        report = evaluate_models({"m": model_as_callable(model)},
                                 workspace / "cache" / "gt_shr", SPEC)
        agg = report.aggregate("m")
        assert set(agg) == {"consistency", "sharpness"}

    def test_settings_share_identical_inputs(self, workspace, tmp_path):
        for setting in ("sl_lr_hr", "ssl_lr_hr"):
            config = TrainConfig(setting=setting, arch="unet800k", band_id="SYN",
                                 max_epochs=1, seed=2, arch_cfg=TOY, eq_margin=1)
            train_band(config, workspace / "cache" / "lr_hr", tmp_path / setting, SPEC)
        a = json.loads((tmp_path / "sl_lr_hr" / "config.json").read_text())
        b = json.loads((tmp_path / "ssl_lr_hr" / "config.json").read_text())
        assert a["cache_hash"] == b["cache_hash"]
        assert a["manifest_hash"] == b["manifest_hash"]


class TestProducts:
    def test_superresolve_and_visualize(self, workspace, tmp_path):
        model = zero_residual_(build_model("unet800k", SPEC, cfg=TOY, seed=0))
        stats = ChannelStats.load(workspace / "cache" / "lr_hr" / "stats.npz")
        scene = load_scene(workspace / "scenes", "scene_000")
        meta = superresolve_scene(model, scene, stats, SPEC, tmp_path / "prod", tile=8)
        assert meta["shapes"]["shr"] == [4, 256, 256]
        assert meta["shapes"]["a_shr"] == [4, 64, 64]
        written = visualize_products(tmp_path / "prod", tmp_path / "figs", "SYN")
        names = {p.split("/")[-1] for p in written}
        assert names == {"gt.png", "bicubic.png", "shr.png", "a_shr.png", "panel.png"}
