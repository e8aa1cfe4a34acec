import json

import numpy as np
import pytest
import yaml

from s5p_ssr.cli import main
from s5p_ssr.config import validate_config
from s5p_ssr.errors import ConfigError
from s5p_ssr.models import UnetCfg


def toy_raw(workdir, **train_overrides):
    train = {
        "setting": "ssl_lr_hr",
        "arch": "unet800k",
        "max_epochs": 2,
        "seed": 3,
        "eq_margin": 1,
        "arch_widths": {
            "encoder": [4, 3, 2],
            "decoder": [2, 4, 8],
            "stage_modules": 3,
        },
    }
    train.update(train_overrides)
    return {
        "band": {"id": "SYN", "channels": 4, "snr_linear": 900, "mu": 2.0e-5,
                 "lr_patch": 8},
        "paths": {"workdir": str(workdir)},
        "scene": {"count": 8, "height": 64, "width": 64, "seed": 42,
                  "smoothness": 2.0, "spectral_rank": 2},
        "data": {"along_crop": 64, "polar_fraction": 0.0},
        "train": train,
    }


class TestValidateConfig:
    def test_empty_band_override_materializes_table_defaults(self):
        run = validate_config(raw={"band": {"id": "BD4"}})
        spec = run.band_spec()
        assert spec.snr_linear == 1344
        assert spec.mu == 4.25e-7
        assert spec.channels == 497
        assert spec.lr_patch == 112
        assert spec.scale == 4

    def test_lambda_defaults_to_one(self):
        run = validate_config(raw={"band": {"id": "BD2"}})
        assert run.cfg["train"]["eq_lam"] == 1.0
        assert run.cfg["train"]["lr0"] == 1e-3
        assert run.cfg["data"]["clean_threshold"] == 1e-2
        assert run.cfg["data"]["fractions"] == [0.65, 0.20, 0.15]

    def test_negative_threshold_rejected(self):
        with pytest.raises(ConfigError, match="clean_threshold"):
            validate_config(raw={"band": {"id": "BD2"},
                                 "data": {"clean_threshold": -1}})

    def test_unknown_keys_fatal(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            validate_config(raw={"band": {"id": "BD2"}, "trian": {}})
        with pytest.raises(ConfigError, match="train.lr_zero"):
            validate_config(raw={"band": {"id": "BD2"}, "train": {"lr_zero": 1}})

    def test_overrides_applied_before_validation(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"band": {"id": "BD2"}}))
        run = validate_config(path, overrides=["train.eq_lam=0.5", "train.arch=dscr_s"])
        assert run.cfg["train"]["eq_lam"] == 0.5
        assert run.cfg["train"]["arch"] == "dscr_s"

    def test_bad_override_syntax(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"band": {"id": "BD2"}}))
        with pytest.raises(ConfigError):
            validate_config(path, overrides=["train.eq_lam"])

    def test_synthetic_band_requires_metadata(self):
        with pytest.raises(ConfigError, match="band.channels"):
            validate_config(raw={"band": {"id": "SYNX", "lr_patch": 8}})

    def test_arch_cfg_from_widths(self, tmp_path):
        run = validate_config(raw=toy_raw(tmp_path))
        cfg = run.arch_cfg(run.band_spec())
        assert isinstance(cfg, UnetCfg)
        assert cfg.encoder_widths == (4, 3, 2)
        assert cfg.stage_modules == 3

    def test_run_name_default(self, tmp_path):
        run = validate_config(raw=toy_raw(tmp_path))
        assert run.run_name() == "ssl_lr_hr_unet800k"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("cli")
    config = workdir / "config.yaml"
    config.write_text(yaml.safe_dump(toy_raw(workdir)))
    return workdir, config


class TestCliChain:
    def test_full_chain(self, workspace, capsys):
        workdir, config = workspace
        assert main(["synth-data", "--config", str(config)]) == 0
        assert (workdir / "scenes" / "scene_007.npy").exists()
        assert (workdir / "scenes" / "config_used.json").exists()

        assert main(["prepare", "--config", str(config)]) == 0
        assert (workdir / "cache" / "lr_hr" / "cache_hash.json").exists()
        assert (workdir / "cache" / "gt_shr" / "cache_hash.json").exists()

        # prepare is idempotent: second run verifies hashes and exits 0
        assert main(["prepare", "--config", str(config)]) == 0

        assert main(["train", "--config", str(config)]) == 0
        run_dir = workdir / "runs" / "ssl_lr_hr_unet800k"
        assert (run_dir / "best.pt").exists()
        assert (run_dir / "config.json").exists()

        assert main(["evaluate", "--config", str(config)]) == 0
        report = workdir / "reports" / "ssl_lr_hr_unet800k_test.csv"
        assert report.exists()
        text = report.read_text()
        assert "bicubic" in text and "psnr" in text and "mean" in text

        assert main(["superresolve", "--config", str(config)]) == 0
        products = list((workdir / "products" / "ssl_lr_hr_unet800k").glob("*/shr.npy"))
        assert products
        shr = np.load(products[0])
        meta = json.loads((products[0].parent / "meta.json").read_text())
        assert list(shr.shape) == meta["shapes"]["shr"]
        assert meta["shapes"]["shr"][1] == 4 * meta["shapes"]["gt"][1]
        a_shr = np.load(products[0].parent / "a_shr.npy")
        assert list(a_shr.shape) == meta["shapes"]["gt"]

        assert main(["visualize", "--config", str(config)]) == 0
        figures = workdir / "figures" / "ssl_lr_hr_unet800k"
        pngs = list(figures.glob("*/*.png"))
        names = {p.name for p in pngs}
        assert {"gt.png", "bicubic.png", "shr.png", "a_shr.png", "panel.png"} <= names

    def test_prepare_mismatch_exit_code(self, workspace):
        workdir, config = workspace
        code = main(["prepare", "--config", str(config), "--set", "data.lr_seed=99"])
        assert code == 3

    def test_missing_upstream_named(self, tmp_path, capsys):
        config = tmp_path / "c.yaml"
        config.write_text(yaml.safe_dump(toy_raw(tmp_path)))
        code = main(["train", "--config", str(config)])
        assert code == 2
        err = capsys.readouterr().err
        assert "prepare" in err

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        config = tmp_path / "c.yaml"
        config.write_text(yaml.safe_dump({"nonsense": 1}))
        assert main(["synth-data", "--config", str(config)]) == 2
        assert "unknown config key" in capsys.readouterr().err
