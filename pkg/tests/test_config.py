"""TOML config loading, schema validation and overrides."""

import pytest

from linepose.config import ConfigError, TrainConfig, from_dict, load_config


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


class TestDefaults:
    def test_documented_defaults(self):
        cfg = load_config()
        assert (cfg.train.n_points, cfg.train.n_lines) == (384, 192)
        assert cfg.train.lr == 1e-4 and cfg.train.batch_size == 16
        assert cfg.model.variant == "full" and cfg.model.scale_mode == "unit"

    def test_to_dict_roundtrip(self):
        cfg = load_config(overrides={"model.width": 16, "train.steps": 5, "synth.pixel_noise": 0.5})
        assert from_dict(cfg.to_dict()) == cfg


class TestFile:
    def test_file_and_override_precedence(self, tmp_path):
        path = write(tmp_path, '[model]\nwidth = 16\nheads = 2\n[train]\nsteps = 7\nlr = 1e-3\n')
        cfg = load_config(path, {"train.steps": 9, "train.seed": None})
        assert cfg.model.width == 16 and cfg.train.lr == 1e-3
        assert cfg.train.steps == 9 and cfg.train.seed == 0

    def test_tuple_and_optional_fields(self, tmp_path):
        path = write(tmp_path, "[synth]\ndepth_range = [2, 9]\n[train]\nstop_rot_deg = 2\n")
        cfg = load_config(path)
        assert cfg.synth.depth_range == (2.0, 9.0) and cfg.train.stop_rot_deg == 2.0

    @pytest.mark.parametrize(
        "text,needle",
        [
            ("[modle]\nwidth = 4\n", "unknown section"),
            ("[model]\nwidht = 4\n", "unknown key model.widht"),
            ('[model]\nwidth = "big"\n', "model.width"),
            ("[train]\nlr = true\n", "train.lr"),
            ("[model]\nlayer_norm = 1\n", "true/false"),
            ("[synth]\ndepth_range = [1]\n", "2-element"),
            ("model = 3\n", "must be a table"),
            ("[model\n", "run.toml"),
        ],
    )
    def test_schema_errors(self, tmp_path, text, needle):
        with pytest.raises(ConfigError, match=needle):
            load_config(write(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.toml")


class TestValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"model.width": 10, "model.heads": 4},
            {"model.variant": "+W"},
            {"train.n_points": 0},
            {"train.n_lines": 0},
            {"train.lr": -1.0},
            {"train.batch_size": 0},
            {"train.resample": "epoch"},
            {"model.scale_mode": "pixels"},
            {"synth.outlier_fraction": 1.5},
        ],
    )
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            load_config(overrides=overrides)

    def test_point_only_variant_allows_no_lines(self):
        cfg = load_config(overrides={"model.variant": "+V", "train.n_lines": 0})
        assert cfg.train.n_lines == 0

    def test_validate_returns_self(self):
        cfg = TrainConfig()
        assert cfg.validate() is cfg
