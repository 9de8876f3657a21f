import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml
from numpy.testing import assert_array_equal
from typer.testing import CliRunner

from src import runner
from src.config import ConfigError, ExperimentConfig
from src.guidance import sample_unguided
from src.runner import (
    GRID_CELLS,
    METRIC_COLUMNS,
    GridCellError,
    app,
    cell_by_name,
    check_orderings,
    check_sweep,
    load_world,
    resolve_cells,
    run_cell,
    run_grid,
    run_sample,
    run_scale_sweep,
    train_config,
)

SMALL = dict(steps=20, beta_start=0.005, beta_end=0.5, num_chains=8, fid_reference_count=16, plots=False)


def small_config(tmp_path, **overrides):
    values = dict(SMALL, output_dir=str(tmp_path / "out"))
    values.update(overrides)
    return ExperimentConfig(**values)


def write_config(path, **overrides):
    values = dict(SMALL)
    values.update(overrides)
    path.write_text(yaml.safe_dump(values))
    return str(path)


def read_manifest(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


class TestCells:
    def test_grid_layout(self):
        assert [c.name for c in GRID_CELLS] == [
            "robust-plain", "robust-x0pred", "robust-adam", "robust-both",
            "nonrobust-plain", "nonrobust-x0pred", "nonrobust-adam", "nonrobust-both",
        ]
        both = cell_by_name("nonrobust-both")
        assert both.x0pred and both.adam and both.index == 7

    def test_resolve(self):
        assert resolve_cells(["all"]) == GRID_CELLS
        picked = resolve_cells(["nonrobust-adam", "robust-plain"])
        assert [c.index for c in picked] == [0, 6]
        with pytest.raises(ConfigError):
            resolve_cells(["robust-fancy"])
        with pytest.raises(ConfigError):
            cell_by_name("robust-fancy")


class TestRunCell:
    def test_zero_scale_is_unguided(self, tmp_path):
        cfg = small_config(tmp_path, scale=0.0)
        world = load_world(cfg)
        result = run_cell(cfg, world, cell_by_name("nonrobust-both"), seed=5)
        assert_array_equal(result.samples, sample_unguided(world.denoiser, world.sched, 8, 5))
        assert result.wall_ms is None

    def test_wall_clock_on_request(self, tmp_path):
        cfg = small_config(tmp_path, record_wall_clock=True)
        result = run_cell(cfg, load_world(cfg), GRID_CELLS[0], seed=1)
        assert result.wall_ms > 0
        assert 0.0 <= result.accuracy <= 1.0 and result.fid >= 0.0

    def test_target_class_checked(self, tmp_path):
        with pytest.raises(ConfigError):
            load_world(small_config(tmp_path, target_class=4))

    def test_sprite_world_needs_artifacts(self, tmp_path):
        cfg = small_config(tmp_path, world="sprites", dataset_path=str(tmp_path / "none.bin"))
        with pytest.raises(FileNotFoundError, match="gen-data"):
            load_world(cfg)


class TestGrid:
    def test_full_grid(self, tmp_path):
        cfg = small_config(tmp_path, plots=True)
        metrics = run_grid(cfg)
        out = tmp_path / "out"
        assert list(metrics.columns) == METRIC_COLUMNS
        assert list(metrics["cell"]) == [c.name for c in GRID_CELLS]
        assert list(metrics["seed"]) == list(range(8))
        for cell in GRID_CELLS:
            trace = pd.read_csv(out / "traces" / f"{cell.name}.csv")
            assert len(trace) == 8 * 20
            assert len(pd.read_csv(out / "cosine" / f"{cell.name}.csv")) == 19
        orderings = pd.read_csv(out / "orderings.csv")
        assert len(orderings) == 14
        assert set(orderings.columns) == {"check", "value", "op", "threshold", "passed"}
        for name in ("cosine_plain.svg", "cosine_nonrobust.svg", "cosine_robust.svg"):
            assert (out / "plots" / name).exists()
        manifest = read_manifest(out / "manifest.json")
        assert manifest["status"] == "complete"
        assert "metrics.csv" in manifest["files"]
        assert "timings_ms" not in manifest

    def test_saves_cell_and_unguided_samples(self, tmp_path):
        cfg = small_config(tmp_path, plots=True)
        run_grid(cfg)
        out = tmp_path / "out"
        manifest = read_manifest(out / "manifest.json")
        for stem in [c.name for c in GRID_CELLS] + ["unguided"]:
            samples = np.load(out / "samples" / f"{stem}.npy")
            assert samples.shape == (8, 2)
            assert (out / "samples" / f"{stem}.svg").exists()
            assert os.path.join("samples", f"{stem}.npy") in manifest["files"]
            assert os.path.join("samples", f"{stem}.svg") in manifest["files"]
        baseline = manifest["unguided"]
        assert baseline["seed"] == 8
        assert 0.0 <= baseline["accuracy"] <= 1.0
        assert np.isfinite(baseline["fid"])
        world = load_world(cfg)
        expected = sample_unguided(world.denoiser, world.sched, 8, 8)
        assert_array_equal(np.load(out / "samples" / "unguided.npy"), expected)

    def test_sample_saving_can_be_disabled(self, tmp_path):
        run_grid(small_config(tmp_path, save_samples=False))
        manifest = read_manifest(tmp_path / "out" / "manifest.json")
        assert "unguided" not in manifest
        assert not any(f.startswith("samples") for f in manifest["files"])

    def test_reproducible(self, tmp_path):
        run_grid(small_config(tmp_path, output_dir=str(tmp_path / "a")))
        run_grid(small_config(tmp_path, output_dir=str(tmp_path / "b")))
        for rel in ("metrics.csv", "orderings.csv", os.path.join("traces", "robust-both.csv")):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_partial_grid_with_repeats(self, tmp_path):
        cfg = small_config(tmp_path, cells=["robust-plain", "nonrobust-plain"], repeats=2)
        metrics = run_grid(cfg)
        assert len(metrics) == 4
        assert list(metrics["seed"]) == [0, 4, 100, 104]
        assert not (tmp_path / "out" / "orderings.csv").exists()
        assert (tmp_path / "out" / "traces" / "robust-plain_r1.csv").exists()

    def test_failed_cell_marks_manifest(self, tmp_path, monkeypatch):
        real = runner.run_cell

        def flaky(cfg, world, cell, seed, scale=None):
            if cell.name == "robust-adam":
                raise FloatingPointError("overflow")
            return real(cfg, world, cell, seed, scale)

        monkeypatch.setattr(runner, "run_cell", flaky)
        with pytest.raises(GridCellError) as info:
            run_grid(small_config(tmp_path))
        assert info.value.cell == "robust-adam"
        manifest = read_manifest(tmp_path / "out" / "manifest.json")
        assert manifest["status"] == "incomplete"
        assert manifest["failed_cell"] == "robust-adam"
        assert len(manifest["cells"]) == 2


class TestOrderingReports:
    def test_needs_all_cells(self):
        metrics = pd.DataFrame({"cell": ["robust-plain"], "fid": [1.0], "accuracy": [1.0]})
        with pytest.raises(ValueError):
            check_orderings(metrics, {})

    def test_sweep_checks(self):
        good = pd.DataFrame({"scale": [0.0, 0.1, 1.0], "fid": [2.0, 1.0, 3.0], "accuracy": [0.3, 0.7, 0.99]})
        assert check_sweep(good)["passed"].all()
        bad = pd.DataFrame({"scale": [0.0, 0.1, 1.0], "fid": [1.0, 2.0, 3.0], "accuracy": [0.6, 0.3, 0.9]})
        assert not check_sweep(bad)["passed"].any()


class TestSweep:
    def test_sorted_shared_seed(self, tmp_path):
        cfg = small_config(tmp_path, plots=True, sweep_cell="robust-x0pred")
        table = run_scale_sweep(cfg, [0.16, 0.0, 0.04])
        assert list(table["scale"]) == [0.0, 0.04, 0.16]
        assert set(table["seed"]) == {1}
        out = tmp_path / "out"
        for name in ("sweep.csv", "sweep_orderings.csv", "sweep.svg", "sweep_manifest.json"):
            assert (out / name).exists()

    @pytest.mark.parametrize("scales", [[0.1], [0.1, -0.2]])
    def test_rejects(self, tmp_path, scales):
        with pytest.raises(ValueError):
            run_scale_sweep(small_config(tmp_path), scales)


class TestTrainConfig:
    def test_only_noisy_classifier_is_time_conditioned(self):
        cfg = ExperimentConfig(world="sprites", classifier_time_conditioning=True)
        assert train_config(cfg, "noisy").time_conditioning
        assert train_config(cfg, "noisy").noisy_training
        assert not train_config(cfg, "clean").time_conditioning
        assert train_config(cfg, "denoiser").time_conditioning


class TestSample:
    def test_gmm_sample(self, tmp_path):
        cfg = small_config(tmp_path, checkpoints=[20, 10])
        result = run_sample(cfg)
        out = tmp_path / "out"
        assert np.load(out / "samples.npy").shape == (8, 2)
        assert (out / "samples.svg").exists()
        assert_array_equal(np.load(out / "snapshot_t10.npy"), result.trace.snapshots[10])
        assert read_manifest(out / "sample_manifest.json")["status"] == "complete"

    def test_gen_data_rejects_gmm(self, tmp_path):
        with pytest.raises(ValueError):
            runner.generate_data(small_config(tmp_path))

    def test_tiny_sprite_pipeline(self, tmp_path):
        cfg = small_config(
            tmp_path,
            world="sprites",
            steps=5,
            sprite_image_size=8,
            dataset_size=120,
            dataset_path=str(tmp_path / "sprites.bin"),
            classifier_clean_path=str(tmp_path / "clean.npz"),
            classifier_noisy_path=str(tmp_path / "noisy.npz"),
            denoiser_path=str(tmp_path / "denoiser.npz"),
            classifier_epochs=1,
            denoiser_epochs=1,
            hidden_width=16,
            fid_reference_count=8,
            sample_cell="robust-both",
        )
        runner.generate_data(cfg)
        assert (tmp_path / "sprites_preview.png").exists()
        runner.fit_classifier(cfg, "clean")
        runner.fit_classifier(cfg, "noisy")
        runner.fit_denoiser(cfg)
        result = run_sample(cfg)
        assert result.samples.shape == (8, 192)
        assert (tmp_path / "out" / "samples.png").exists()
        with pytest.raises(ValueError):
            runner.fit_classifier(cfg, "robust")


class TestCli:
    def test_missing_config_is_usage_error(self):
        result = CliRunner().invoke(app, ["grid"])
        assert result.exit_code == 2
        assert "Usage" in result.output

    def test_unknown_key_is_usage_error(self, tmp_path):
        path = write_config(tmp_path / "cfg.yaml", colour="blue")
        result = CliRunner().invoke(app, ["grid", "--config", path])
        assert result.exit_code == 2

    def test_bad_list_element_is_usage_error(self, tmp_path):
        path = write_config(tmp_path / "cfg.yaml", sweep_scales=["x"])
        result = CliRunner().invoke(app, ["sweep", "--config", path])
        assert result.exit_code == 2
        assert "sweep_scales" in result.output

    def test_grid_twice_is_identical(self, tmp_path):
        path = write_config(tmp_path / "cfg.yaml", cells=["robust-plain", "nonrobust-both"])
        cli = CliRunner()
        for name in ("a", "b"):
            result = cli.invoke(app, ["grid", "-c", path, "-o", str(tmp_path / name), "--seed", "3"])
            assert result.exit_code == 0, result.output
        first = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert first == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert list(pd.read_csv(tmp_path / "a" / "metrics.csv")["seed"]) == [3, 10]

    def test_single_scale_sweep_fails(self, tmp_path):
        path = write_config(tmp_path / "cfg.yaml")
        result = CliRunner().invoke(app, ["sweep", "-c", path, "-o", str(tmp_path / "s"), "--scale", "0.1"])
        assert result.exit_code == 1
        assert "❌" in result.output

    def test_gen_data_on_gmm_fails(self, tmp_path):
        path = write_config(tmp_path / "cfg.yaml")
        result = CliRunner().invoke(app, ["gen-data", "-c", path])
        assert result.exit_code == 1


GRID_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs", "gmm_grid.yaml")

# orderings the shipped GMM config must reach at one of the first three seeds
PINNED_ORDERINGS = [
    "accuracy_robust_over_nonrobust",
    "accuracy_both_over_plain_nonrobust",
    "accuracy_adam_only_unchanged",
    "fid_both_below_plain_nonrobust",
    "fid_robust_below_nonrobust",
    "accuracy_robust_both_not_better",
    "fid_robust_both_not_better",
]


def shipped_grid_config(tmp_path, seed):
    cfg = ExperimentConfig.from_file(GRID_CONFIG)
    cfg.seed = seed
    cfg.output_dir = str(tmp_path / f"seed{seed}")
    cfg.plots = False
    cfg.save_samples = False
    return cfg


@pytest.mark.slow
class TestShippedGmmGrid:
    def test_orderings_hold(self, tmp_path):
        pending = set(PINNED_ORDERINGS)
        for seed in range(3):
            run_grid(shipped_grid_config(tmp_path, seed))
            report = pd.read_csv(tmp_path / f"seed{seed}" / "orderings.csv").set_index("check")
            pending -= {name for name in pending if report.loc[name, "passed"]}
            if not pending:
                break
        assert not pending, f"never held at seeds 0-2: {sorted(pending)}"

    def test_clean_classifier_gives_no_guidance_on_noisy_inputs(self, tmp_path):
        cfg = shipped_grid_config(tmp_path, 0)
        world = load_world(cfg)
        result = run_cell(cfg, world, cell_by_name("nonrobust-plain"), 0)
        # saturated posterior: exactly zero gradient on all but the rarest near-clean steps
        assert np.mean(result.trace.cond_norm > 0) <= 0.01
        guided = run_cell(cfg, world, cell_by_name("robust-plain"), 0)
        assert guided.accuracy - result.accuracy >= 0.3

    def test_sweep_checks_hold(self, tmp_path):
        pending = {"accuracy_monotone_to_saturation", "fid_interior_knee"}
        for seed in range(3):
            run_scale_sweep(shipped_grid_config(tmp_path, seed))
            report = pd.read_csv(tmp_path / f"seed{seed}" / "sweep_orderings.csv").set_index("check")
            pending -= {name for name in pending if report.loc[name, "passed"]}
            if not pending:
                break
        assert not pending, f"never held at seeds 0-2: {sorted(pending)}"
