import os

import pytest

from src.config import Config, ConfigError, ExperimentConfig

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


class TestExperimentConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.steps == 200
        assert cfg.beta_start == 5e-4 and cfg.beta_end == 0.1
        assert cfg.scale == 0.04
        assert cfg.cells == ["all"]

    @pytest.mark.parametrize("name", ["gmm_grid.yaml", "gmm_plane.yaml", "gmm_literal.yaml", "sprites.yaml"])
    def test_shipped_configs_load(self, name):
        cfg = ExperimentConfig.from_file(os.path.join(CONFIG_DIR, name))
        assert cfg.world in {"gmm", "sprites"}

    def test_from_dict_coerces_numbers(self):
        cfg = ExperimentConfig.from_dict({"scale": 1, "steps": 50})
        assert isinstance(cfg.scale, float) and cfg.scale == 1.0
        assert cfg.steps == 50

    def test_empty_mapping_gives_defaults(self):
        assert ExperimentConfig.from_dict(None) == ExperimentConfig()

    @pytest.mark.parametrize("raw", [
        {"stepz": 10},
        {"steps": "ten"},
        {"steps": 2.5},
        {"plots": "yes"},
        {"scale": True},
        {"cells": "all"},
        {"world": "mnist"},
        {"variant": "eq3"},
        {"scale": -0.1},
        {"beta_start": 0.2, "beta_end": 0.1},
        {"gmm_priors": [0.5, 0.5]},
        {"gmm_texture_dims": -1},
        {"gmm_texture_dims": 4},
        {"gmm_texture_dims": 4, "gmm_texture_variances": [1e-8, 1e-8, 0.0, 1e-8]},
        {"gmm_texture_dims": 4, "gmm_texture_variances": [1e-8, 1e-8]},
        {"fid_dims": -2},
    ])
    def test_rejects(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    @pytest.mark.parametrize("raw", [
        {"sweep_scales": ["x"]},
        {"sweep_scales": [0.0, None]},
        {"checkpoints": [1.5]},
        {"checkpoints": [True]},
        {"cells": [3]},
        {"gmm_means": [[0.0, 1.0], [2.0, "far"]]},
        {"gmm_texture_variances": ["tiny", 1e-8, 1e-8, 1e-8]},
    ])
    def test_rejects_bad_list_elements(self, raw):
        key = next(iter(raw))
        with pytest.raises(ConfigError, match=key):
            ExperimentConfig.from_dict(raw)

    def test_accepts_integer_scales(self):
        cfg = ExperimentConfig.from_dict({"sweep_scales": [0, 1, 0.5]})
        assert cfg.sweep_scales == [0, 1, 0.5]

    def test_texture_world_keys(self):
        cfg = ExperimentConfig.from_dict({
            "gmm_texture_dims": 4,
            "gmm_texture_variances": [2e-8, 1e-8, 1e-8, 1e-8],
            "fid_dims": 2,
        })
        assert cfg.gmm_texture_dims == 4 and cfg.fid_dims == 2

    def test_rejects_non_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.from_file(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.from_file(str(tmp_path / "absent.yaml"))

    def test_round_trip_through_dict(self):
        cfg = ExperimentConfig(steps=20, cells=["robust-plain"], gmm_extra_dims=2)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


class TestOutputDir:
    def test_explicit(self):
        assert ExperimentConfig(output_dir="out/x").resolved_output_dir() == "out/x"

    def test_from_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("GRADCHECK_OUTPUT_DIR", str(tmp_path))
        assert ExperimentConfig(world="sprites").resolved_output_dir(Config()) == os.path.join(
            str(tmp_path), "sprites_run"
        )

    def test_progress_switch(self, monkeypatch):
        monkeypatch.setenv("GRADCHECK_PROGRESS", "0")
        assert Config().SHOW_PROGRESS is False
        monkeypatch.setenv("GRADCHECK_PROGRESS", "1")
        assert Config().SHOW_PROGRESS is True
