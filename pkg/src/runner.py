"""
Experiment orchestration for the guidance laboratory.

Builds a world (analytic GMM or trained sprite networks), runs the eight
grid cells (classifier robust/non-robust x x̂0-prediction x ADAM), the
guidance-scale sweep and single sample runs, and writes CSV tables, SVG/PNG
figures and a JSON manifest into the output directory. The typer ``app`` at
the bottom is the command-line surface.
"""

import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import typer
from tqdm import tqdm

from .analysis import (
    CosineSeries,
    cosine_series,
    frechet_distance,
    guidance_accuracy,
    plot_cosine_series,
    plot_samples_2d,
    plot_scale_sweep,
    series_frame,
    trace_frame,
    window_mean,
)
from .config import Config, ConfigError, ExperimentConfig
from .gmm_world import (
    GmmClassifier,
    GmmDenoiser,
    default_world,
    gmm_from_dict,
    sample_class,
    sample_data,
)
from .guidance import GuidanceConfig, SamplerTrace, WorldHandles, sample_guided, sample_unguided
from .nn import (
    MlpClassifier,
    MlpDenoiser,
    TrainConfig,
    load_model,
    noisy_accuracy,
    save_model,
    train_classifier,
    train_denoiser,
)
from .schedule import NoiseSchedule, linear_schedule
from .sprites import SpriteConfig, class_reference, generate, load_dataset, save_dataset, save_sample_grid

REFERENCE_SEED_OFFSET = 10_000
REPEAT_SEED_STRIDE = 100
# first seed past the eight cells; repeats step by REPEAT_SEED_STRIDE so it never collides
UNGUIDED_SEED_OFFSET = 8
METRIC_COLUMNS = ["cell", "classifier", "x0pred", "adam", "fid", "accuracy", "seed", "wall_ms", "repeat"]


class GridCellError(RuntimeError):
    """A grid cell failed; ``cell`` names it."""

    def __init__(self, cell: str, cause: Exception):
        super().__init__(f"grid cell {cell} failed: {cause}")
        self.cell = cell
        self.cause = cause


@dataclass(frozen=True)
class GridCell:
    index: int
    name: str
    classifier: str
    x0pred: bool
    adam: bool


GRID_CELLS = [
    GridCell(i, f"{clf}-{mod}", clf, mod in ("x0pred", "both"), mod in ("adam", "both"))
    for i, (clf, mod) in enumerate(
        (clf, mod) for clf in ("robust", "nonrobust") for mod in ("plain", "x0pred", "adam", "both")
    )
]
CELLS_BY_NAME = {cell.name: cell for cell in GRID_CELLS}


def resolve_cells(names: List[str]) -> List[GridCell]:
    if "all" in names:
        return list(GRID_CELLS)
    unknown = [n for n in names if n not in CELLS_BY_NAME]
    if unknown:
        raise ConfigError(f"unknown grid cells: {', '.join(unknown)} (known: {', '.join(CELLS_BY_NAME)})")
    return sorted({CELLS_BY_NAME[n] for n in names}, key=lambda c: c.index)


def cell_by_name(name: str) -> GridCell:
    if name not in CELLS_BY_NAME:
        raise ConfigError(f"unknown grid cell {name!r}")
    return CELLS_BY_NAME[name]


@dataclass
class World:
    """Everything a grid cell needs: handles, the FID reference set and a data cloud for figures."""

    kind: str
    sched: NoiseSchedule
    denoiser: object
    classifiers: Dict[str, object]
    reference: np.ndarray
    data_cloud: Optional[np.ndarray] = None
    sprite_cfg: Optional[SpriteConfig] = None
    fid_dims: int = 0

    def features(self, x: np.ndarray) -> np.ndarray:
        """FID features: the leading ``fid_dims`` coordinates, or all of them when 0."""
        return x[:, :self.fid_dims] if self.fid_dims else x


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return linear_schedule(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.variance_kind)


def build_gmm(cfg: ExperimentConfig):
    if cfg.gmm_priors is not None:
        try:
            return gmm_from_dict(
                {"gmm_priors": cfg.gmm_priors, "gmm_means": cfg.gmm_means, "gmm_covariances": cfg.gmm_covariances}
            )
        except ValueError as e:
            raise ConfigError(f"invalid GMM parameters: {e}") from e
    try:
        return default_world(cfg.gmm_extra_dims, cfg.gmm_texture_dims, cfg.gmm_texture_variances)
    except ValueError as e:
        raise ConfigError(f"invalid GMM world: {e}") from e


def _require_file(path: str, hint: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")


def _check_fid_dims(cfg: ExperimentConfig, dim: int):
    if cfg.fid_dims > dim:
        raise ConfigError(f"fid_dims {cfg.fid_dims} exceeds the world dimension {dim}")


def load_world(cfg: ExperimentConfig) -> World:
    sched = build_schedule(cfg)
    ref_rng = np.random.default_rng(cfg.seed + REFERENCE_SEED_OFFSET)
    if cfg.world == "gmm":
        gmm = build_gmm(cfg)
        if not 0 <= cfg.target_class < gmm.num_classes:
            raise ConfigError(f"target_class {cfg.target_class} outside [0, {gmm.num_classes})")
        _check_fid_dims(cfg, gmm.dim)
        return World(
            kind="gmm",
            sched=sched,
            denoiser=GmmDenoiser(gmm, sched),
            classifiers={k: GmmClassifier(gmm, sched, k) for k in ("robust", "nonrobust")},
            reference=sample_class(gmm, cfg.target_class, cfg.fid_reference_count, ref_rng),
            data_cloud=sample_data(gmm, 1000, ref_rng)[0],
            fid_dims=cfg.fid_dims,
        )

    _require_file(cfg.dataset_path, "gen-data")
    _require_file(cfg.classifier_noisy_path, "train-classifier --kind noisy")
    _require_file(cfg.classifier_clean_path, "train-classifier --kind clean")
    _require_file(cfg.denoiser_path, "train-denoiser")
    data = load_dataset(cfg.dataset_path)
    if not 0 <= cfg.target_class < data.cfg.num_classes:
        raise ConfigError(f"target_class {cfg.target_class} outside [0, {data.cfg.num_classes})")
    _check_fid_dims(cfg, data.cfg.dim)
    return World(
        kind="sprites",
        sched=sched,
        denoiser=MlpDenoiser(load_model(cfg.denoiser_path), sched),
        classifiers={
            "robust": MlpClassifier(load_model(cfg.classifier_noisy_path), sched),
            "nonrobust": MlpClassifier(load_model(cfg.classifier_clean_path), sched),
        },
        reference=class_reference(data, cfg.target_class, cfg.fid_reference_count, cfg.seed + REFERENCE_SEED_OFFSET),
        sprite_cfg=data.cfg,
        fid_dims=cfg.fid_dims,
    )


def guidance_config(cfg: ExperimentConfig, cell: GridCell, world: World, scale: Optional[float] = None) -> GuidanceConfig:
    return GuidanceConfig(
        scale=cfg.scale if scale is None else scale,
        variant=cfg.variant,
        use_x0_pred=cell.x0pred,
        use_adam=cell.adam,
        target_class=cfg.target_class,
        classifier_kind=world.classifiers[cell.classifier].kind,
        num_chains=cfg.num_chains,
        adam_order=cfg.adam_order,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eta=cfg.adam_eta,
        adam_eps=cfg.adam_eps,
        checkpoints=tuple(cfg.checkpoints),
    )


@dataclass
class CellResult:
    cell: GridCell
    seed: int
    samples: np.ndarray
    trace: SamplerTrace
    series: CosineSeries
    fid: float
    accuracy: float
    wall_ms: Optional[float] = None


@dataclass
class UnguidedResult:
    seed: int
    samples: np.ndarray
    fid: float
    accuracy: float


def run_cell(cfg: ExperimentConfig, world: World, cell: GridCell, seed: int,
             scale: Optional[float] = None) -> CellResult:
    """Sample one cell and score it; the guiding classifier is also the accuracy judge."""
    start = time.perf_counter()
    handles = WorldHandles(world.denoiser, world.classifiers[cell.classifier])
    samples, trace = sample_guided(handles, guidance_config(cfg, cell, world, scale), world.sched, seed)
    fid = frechet_distance(world.features(samples), world.features(world.reference))
    accuracy = guidance_accuracy(samples, cfg.target_class, world.classifiers[cell.classifier])
    wall_ms = (time.perf_counter() - start) * 1000.0 if cfg.record_wall_clock else None
    return CellResult(cell, seed, samples, trace, cosine_series(trace), fid, accuracy, wall_ms)


def _write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class _Manifest:
    path: str
    cfg: ExperimentConfig
    kind: str
    files: List[str] = field(default_factory=list)
    cells: List[dict] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)

    def write(self, status: str, failed_cell: Optional[str] = None):
        payload = {
            "kind": self.kind,
            "status": status,
            "config": self.cfg.to_dict(),
            "cells": self.cells,
            "files": sorted(self.files),
        }
        payload.update(self.extras)
        if failed_cell is not None:
            payload["failed_cell"] = failed_cell
        if self.cfg.record_wall_clock:
            payload["timings_ms"] = self.timings
        _write_json(self.path, payload)


def _ordering_row(check: str, value: float, op: str, threshold: float) -> dict:
    ops = {">=": np.greater_equal, "<=": np.less_equal, ">": np.greater}
    passed = bool(np.isfinite(value) and ops[op](value, threshold))
    return {"check": check, "value": value, "op": op, "threshold": threshold, "passed": passed}


def check_orderings(metrics: pd.DataFrame, series: Dict[str, CosineSeries], threshold_scale: float = 1.0) -> pd.DataFrame:
    """Evaluate the expected grid orderings; reporting only, never raises on a failed check.

    ``threshold_scale`` shrinks the accuracy margins (0.5 on the sprite world).
    """
    missing = [c.name for c in GRID_CELLS if c.name not in series or c.name not in set(metrics["cell"])]
    if missing:
        raise ValueError(f"orderings need all eight cells, missing: {', '.join(missing)}")
    row = metrics.drop_duplicates("cell").set_index("cell")
    acc, fid = row["accuracy"], row["fid"]

    def cos(name: str, start: float = 0.0, stop: float = 1.0) -> float:
        return window_mean(series[name], start, stop)

    third = 1.0 / 3.0
    nonrobust_middle = cos("nonrobust-plain", third, 2 * third)
    x0_gap = cos("nonrobust-x0pred") - cos("nonrobust-plain")
    x0_gap_final = cos("nonrobust-x0pred", 2 * third, 1.0) - cos("nonrobust-plain", 2 * third, 1.0)
    rows = [
        _ordering_row("cosine_robust_over_nonrobust_middle",
                      cos("robust-plain", third, 2 * third) - nonrobust_middle, ">=", 0.2),
        _ordering_row("cosine_nonrobust_middle_low", nonrobust_middle, ">=", -0.15),
        _ordering_row("cosine_nonrobust_middle_high", nonrobust_middle, "<=", 0.25),
        _ordering_row("cosine_x0pred_gain", x0_gap, ">=", 0.1),
        _ordering_row("cosine_x0pred_gain_widens", x0_gap_final - x0_gap, ">=", 0.0),
        _ordering_row("cosine_nonrobust_both_final_half", cos("nonrobust-both", 0.5, 1.0), ">=", 0.9),
        _ordering_row("accuracy_robust_over_nonrobust",
                      acc["robust-plain"] - acc["nonrobust-plain"], ">=", 0.3 * threshold_scale),
        _ordering_row("accuracy_both_over_plain_nonrobust",
                      acc["nonrobust-both"] - acc["nonrobust-plain"], ">=", 0.2 * threshold_scale),
        _ordering_row("accuracy_adam_only_unchanged",
                      abs(acc["nonrobust-adam"] - acc["nonrobust-plain"]), "<=", 0.1),
        _ordering_row("fid_both_below_plain_nonrobust", fid["nonrobust-plain"] - fid["nonrobust-both"], ">", 0.0),
        _ordering_row("fid_robust_below_nonrobust", fid["nonrobust-plain"] - fid["robust-plain"], ">", 0.0),
        _ordering_row("cosine_robust_both_not_lower", cos("robust-both") - cos("robust-plain"), ">=", 0.0),
        _ordering_row("accuracy_robust_both_not_better", acc["robust-both"] - acc["robust-plain"], "<=", 0.02),
        _ordering_row("fid_robust_both_not_better", fid["robust-both"] - fid["robust-plain"], ">=", -1.0),
    ]
    return pd.DataFrame(rows, columns=["check", "value", "op", "threshold", "passed"])


def check_sweep(table: pd.DataFrame, saturation: float = 0.95, tolerance: float = 0.02) -> pd.DataFrame:
    """Accuracy nondecreasing in s until it saturates; some interior s has FID no worse than both ends."""
    acc = table["accuracy"].to_numpy()
    fid = table["fid"].to_numpy()
    drops = [acc[i] - acc[i + 1] for i in range(len(acc) - 1) if acc[i] < saturation]
    worst_drop = max(drops) if drops else 0.0
    knee = min(fid[0], fid[-1]) - fid[1:-1].min() if len(fid) > 2 else float("nan")
    rows = [
        _ordering_row("accuracy_monotone_to_saturation", worst_drop, "<=", tolerance),
        _ordering_row("fid_interior_knee", knee, ">=", 0.0),
    ]
    return pd.DataFrame(rows, columns=["check", "value", "op", "threshold", "passed"])


def _cell_label(cell: GridCell, repeat: int) -> str:
    return cell.name if repeat == 0 else f"{cell.name}_r{repeat}"


def _plot_grid(series: Dict[str, CosineSeries], out_dir: str, manifest: _Manifest):
    plot_dir = os.path.join(out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    groups = {
        "cosine_plain.svg": ["robust-plain", "nonrobust-plain"],
        "cosine_nonrobust.svg": [c.name for c in GRID_CELLS if c.classifier == "nonrobust"],
        "cosine_robust.svg": [c.name for c in GRID_CELLS if c.classifier == "robust"],
    }
    for filename, names in groups.items():
        present = {n: series[n] for n in names if n in series}
        if not present:
            continue
        plot_cosine_series(present, os.path.join(plot_dir, filename), title=filename[:-4].replace("_", " "))
        manifest.files.append(os.path.join("plots", filename))


def _sample_figure(world: World, samples: np.ndarray, out_dir: str, stem: str, title: str) -> str:
    """Sprite grid (PNG) or 2-D scatter over the data cloud (SVG); returns the relative path."""
    if world.kind == "sprites":
        rel = f"{stem}.png"
        save_sample_grid(samples, world.sprite_cfg, os.path.join(out_dir, rel))
    else:
        rel = f"{stem}.svg"
        plot_samples_2d(samples, os.path.join(out_dir, rel), reference=world.data_cloud, title=title)
    return rel


def _save_samples(world: World, samples: np.ndarray, out_dir: str, stem: str, title: str,
                  figures: bool) -> List[str]:
    rel = os.path.join("samples", stem)
    np.save(os.path.join(out_dir, f"{rel}.npy"), samples)
    files = [f"{rel}.npy"]
    if figures:
        files.append(_sample_figure(world, samples, out_dir, rel, title))
    return files


def run_unguided(cfg: ExperimentConfig, world: World, seed: int) -> UnguidedResult:
    """Plain ancestral samples scored like a cell: the s = 0 baseline every grid run reports."""
    samples = sample_unguided(world.denoiser, world.sched, cfg.num_chains, seed)
    judge = world.classifiers["robust"]
    return UnguidedResult(
        seed=seed,
        samples=samples,
        fid=frechet_distance(world.features(samples), world.features(world.reference)),
        accuracy=guidance_accuracy(samples, cfg.target_class, judge),
    )


def run_grid(cfg: ExperimentConfig, env: Optional[Config] = None) -> pd.DataFrame:
    """Run every enabled cell (times ``repeats``) and write metrics, traces, cosine series, samples, plots and the manifest."""
    env = env or Config()
    cells = resolve_cells(cfg.cells)
    out_dir = cfg.resolved_output_dir(env)
    for sub in ("traces", "cosine", "samples"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest = _Manifest(os.path.join(out_dir, "manifest.json"), cfg, kind="grid")

    print(f"🚀 Running {len(cells)} grid cell(s) x {cfg.repeats} repeat(s) on the {cfg.world} world")
    world = load_world(cfg)

    rows, first_series = [], {}
    jobs = [(repeat, cell) for repeat in range(cfg.repeats) for cell in cells]
    for repeat, cell in tqdm(jobs, desc="Grid cells", disable=not env.SHOW_PROGRESS):
        label = _cell_label(cell, repeat)
        seed = cfg.seed + cell.index + REPEAT_SEED_STRIDE * repeat
        try:
            result = run_cell(cfg, world, cell, seed)
        except Exception as e:
            manifest.write("incomplete", failed_cell=label)
            print(f"❌ Cell {label} failed: {e}")
            raise GridCellError(label, e) from e

        trace_file = os.path.join("traces", f"{label}.csv")
        cosine_file = os.path.join("cosine", f"{label}.csv")
        trace_frame(result.trace).to_csv(os.path.join(out_dir, trace_file), index=False)
        series_frame(result.series).to_csv(os.path.join(out_dir, cosine_file), index=False)
        manifest.files.extend([trace_file, cosine_file])
        manifest.cells.append({"cell": cell.name, "repeat": repeat, "seed": seed, "trace": trace_file, "cosine": cosine_file})
        if cfg.save_samples:
            manifest.files.extend(_save_samples(world, result.samples, out_dir, label,
                                                f"{cell.name}, s={cfg.scale}", cfg.plots))
        if result.wall_ms is not None:
            manifest.timings[label] = result.wall_ms
        if repeat == 0:
            first_series[cell.name] = result.series
        rows.append({
            "cell": cell.name,
            "classifier": cell.classifier,
            "x0pred": cell.x0pred,
            "adam": cell.adam,
            "fid": result.fid,
            "accuracy": result.accuracy,
            "seed": seed,
            "wall_ms": result.wall_ms,
            "repeat": repeat,
        })

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    metrics.to_csv(os.path.join(out_dir, "metrics.csv"), index=False)
    manifest.files.append("metrics.csv")

    if cfg.save_samples:
        baseline = run_unguided(cfg, world, cfg.seed + UNGUIDED_SEED_OFFSET)
        manifest.files.extend(_save_samples(world, baseline.samples, out_dir, "unguided", "unguided", cfg.plots))
        manifest.extras["unguided"] = {"seed": baseline.seed, "fid": baseline.fid, "accuracy": baseline.accuracy}
        print(f"🎲 Unguided baseline: accuracy {baseline.accuracy:.3f}, FID {baseline.fid:.4f}")

    if len(first_series) == len(GRID_CELLS):
        scale = 0.5 if cfg.world == "sprites" else 1.0
        orderings = check_orderings(metrics[metrics["repeat"] == 0], first_series, threshold_scale=scale)
        orderings.to_csv(os.path.join(out_dir, "orderings.csv"), index=False)
        manifest.files.append("orderings.csv")
        print(f"🔍 Orderings: {int(orderings['passed'].sum())}/{len(orderings)} checks hold")
    else:
        print("⚠️ Partial grid, orderings report skipped")

    if cfg.plots:
        _plot_grid(first_series, out_dir, manifest)

    manifest.write("complete")
    print(f"💾 Metrics written to {os.path.join(out_dir, 'metrics.csv')}")
    print("✅ Grid complete!")
    return metrics


def run_scale_sweep(cfg: ExperimentConfig, scales: Optional[List[float]] = None,
                    env: Optional[Config] = None) -> pd.DataFrame:
    """Evaluate ``cfg.sweep_cell`` at every scale with one shared seed; table sorted by s."""
    env = env or Config()
    scales = list(cfg.sweep_scales if scales is None else scales)
    if len(scales) < 2:
        raise ValueError(f"scale sweep needs at least two scale values, got {len(scales)}")
    if any(s < 0 for s in scales):
        raise ValueError(f"guidance scales must be >= 0, got {scales}")
    scales = sorted(float(s) for s in scales)
    cell = cell_by_name(cfg.sweep_cell)
    seed = cfg.seed + cell.index
    out_dir = cfg.resolved_output_dir(env)
    os.makedirs(out_dir, exist_ok=True)
    manifest = _Manifest(os.path.join(out_dir, "sweep_manifest.json"), cfg, kind="sweep")
    manifest.cells.append({"cell": cell.name, "seed": seed, "scales": scales})

    print(f"🚀 Sweeping {len(scales)} guidance scales on cell {cell.name}")
    world = load_world(cfg)
    rows = []
    for s in tqdm(scales, desc="Scale sweep", disable=not env.SHOW_PROGRESS):
        try:
            result = run_cell(cfg, world, cell, seed, scale=s)
        except Exception as e:
            manifest.write("incomplete", failed_cell=f"{cell.name}@s={s}")
            raise GridCellError(f"{cell.name}@s={s}", e) from e
        if result.wall_ms is not None:
            manifest.timings[f"s={s}"] = result.wall_ms
        rows.append({"scale": s, "fid": result.fid, "accuracy": result.accuracy, "seed": seed})

    table = pd.DataFrame(rows, columns=["scale", "fid", "accuracy", "seed"])
    table.to_csv(os.path.join(out_dir, "sweep.csv"), index=False)
    check_sweep(table).to_csv(os.path.join(out_dir, "sweep_orderings.csv"), index=False)
    manifest.files.extend(["sweep.csv", "sweep_orderings.csv"])
    if cfg.plots:
        plot_scale_sweep(table, os.path.join(out_dir, "sweep.svg"), title=f"{cell.name} scale sweep")
        manifest.files.append("sweep.svg")
    manifest.write("complete")
    print(f"💾 Sweep written to {os.path.join(out_dir, 'sweep.csv')}")
    return table


def run_sample(cfg: ExperimentConfig, env: Optional[Config] = None) -> CellResult:
    """Sample ``cfg.sample_cell`` once and write samples.npy, its trace and a sample figure."""
    env = env or Config()
    cell = cell_by_name(cfg.sample_cell)
    out_dir = cfg.resolved_output_dir(env)
    os.makedirs(out_dir, exist_ok=True)
    world = load_world(cfg)
    seed = cfg.seed + cell.index
    result = run_cell(cfg, world, cell, seed)

    manifest = _Manifest(os.path.join(out_dir, "sample_manifest.json"), cfg, kind="sample")
    manifest.cells.append({"cell": cell.name, "seed": seed, "fid": result.fid, "accuracy": result.accuracy})
    np.save(os.path.join(out_dir, "samples.npy"), result.samples)
    trace_frame(result.trace).to_csv(os.path.join(out_dir, "sample_trace.csv"), index=False)
    manifest.files.extend(["samples.npy", "sample_trace.csv"])
    manifest.files.append(_sample_figure(world, result.samples, out_dir, "samples", f"{cell.name}, s={cfg.scale}"))
    for t, snapshot in sorted(result.trace.snapshots.items()):
        name = f"snapshot_t{t}.npy"
        np.save(os.path.join(out_dir, name), snapshot)
        manifest.files.append(name)
    manifest.write("complete")
    print(f"✅ {cell.name}: accuracy {result.accuracy:.3f}, FID {result.fid:.4f}")
    return result


def sprite_config(cfg: ExperimentConfig) -> SpriteConfig:
    return SpriteConfig(
        image_size=cfg.sprite_image_size,
        scale_min=cfg.sprite_scale_min,
        scale_max=cfg.sprite_scale_max,
        seed=cfg.sprite_seed,
    )


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _require_sprites(cfg: ExperimentConfig, command: str):
    if cfg.world != "sprites":
        raise ValueError(f"{command} applies to the sprite world only (config has world: {cfg.world})")


def generate_data(cfg: ExperimentConfig) -> str:
    _require_sprites(cfg, "gen-data")
    scfg = sprite_config(cfg)
    print(f"🎨 Generating {cfg.dataset_size} sprites ({scfg.image_size}x{scfg.image_size})...")
    data = generate(scfg, cfg.dataset_size)
    _ensure_parent(cfg.dataset_path)
    save_dataset(cfg.dataset_path, data)
    preview = os.path.splitext(cfg.dataset_path)[0] + "_preview.png"
    save_sample_grid(data.images[:64], scfg, preview)
    counts = np.bincount(data.labels, minlength=scfg.num_classes)
    print(f"💾 Saved dataset to {cfg.dataset_path} (class counts {counts.tolist()})")
    return cfg.dataset_path


def train_config(cfg: ExperimentConfig, kind: str) -> TrainConfig:
    hidden = (cfg.hidden_width, cfg.hidden_width)
    if kind == "denoiser":
        return TrainConfig(
            epochs=cfg.denoiser_epochs,
            batch_size=cfg.denoiser_batch_size,
            learning_rate=cfg.denoiser_learning_rate,
            seed=cfg.seed,
            hidden_dims=hidden,
            time_conditioning=True,
        )
    return TrainConfig(
        epochs=cfg.classifier_epochs,
        batch_size=cfg.classifier_batch_size,
        learning_rate=cfg.classifier_learning_rate,
        seed=cfg.seed,
        noisy_training=kind == "noisy",
        early_stop_accuracy=cfg.classifier_early_stop,
        hidden_dims=hidden,
        # only the noise-trained classifier sees the step
        time_conditioning=cfg.classifier_time_conditioning and kind == "noisy",
    )


def fit_classifier(cfg: ExperimentConfig, kind: str, env: Optional[Config] = None) -> str:
    if kind not in ("clean", "noisy"):
        raise ValueError(f"classifier kind must be clean or noisy, got {kind!r}")
    _require_sprites(cfg, "train-classifier")
    env = env or Config()
    _require_file(cfg.dataset_path, "gen-data")
    data = load_dataset(cfg.dataset_path)
    sched = build_schedule(cfg)
    print(f"🧠 Training {kind} classifier on {len(data)} sprites...")
    net = train_classifier((data.points(), data.labels), train_config(cfg, kind), sched,
                           progress=env.SHOW_PROGRESS)
    last = net.history[-1]
    noisy = noisy_accuracy(net, data.points(), data.labels, sched, seed=cfg.seed)
    print(f"✅ Epoch {last['epoch']}: validation accuracy {last['val_accuracy']:.3f}, "
          f"noisy-latent accuracy {noisy:.3f}")
    path = cfg.classifier_noisy_path if kind == "noisy" else cfg.classifier_clean_path
    _ensure_parent(path)
    save_model(net, path)
    print(f"💾 Saved classifier to {path}")
    return path


def fit_denoiser(cfg: ExperimentConfig, env: Optional[Config] = None) -> str:
    _require_sprites(cfg, "train-denoiser")
    env = env or Config()
    _require_file(cfg.dataset_path, "gen-data")
    data = load_dataset(cfg.dataset_path)
    print(f"🧠 Training denoiser on {len(data)} sprites...")
    net = train_denoiser(data.points(), train_config(cfg, "denoiser"), build_schedule(cfg),
                         progress=env.SHOW_PROGRESS)
    print(f"✅ Final training loss {net.history[-1]['loss']:.5f}")
    _ensure_parent(cfg.denoiser_path)
    save_model(net, cfg.denoiser_path)
    print(f"💾 Saved denoiser to {cfg.denoiser_path}")
    return cfg.denoiser_path


# ---------------------------------------------------------------- CLI

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Classifier-guidance gradient laboratory.")

ConfigOption = typer.Option(..., "--config", "-c", help="Experiment YAML file.")
SeedOption = typer.Option(None, "--seed", help="Override the base seed.")
OutputOption = typer.Option(None, "--output-dir", "-o", help="Override the output directory.")


def load_config(path: str, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_file(path)
        if seed is not None:
            cfg.seed = seed
        if output_dir is not None:
            cfg.output_dir = output_dir
        cfg.validate()
    except (ConfigError, FileNotFoundError) as e:
        raise typer.BadParameter(str(e), param_hint="--config") from e
    return cfg


@contextmanager
def _report_errors():
    try:
        yield
    except (ValueError, OSError, GridCellError) as e:
        typer.echo(f"❌ {e}", err=True)
        raise typer.Exit(code=1) from e


@app.command("gen-data")
def gen_data_cmd(config: str = ConfigOption, seed: Optional[int] = SeedOption,
                 output_dir: Optional[str] = OutputOption):
    """Generate the sprite dataset."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        generate_data(cfg)


@app.command("train-classifier")
def train_classifier_cmd(config: str = ConfigOption,
                         kind: str = typer.Option("clean", "--kind", help="clean or noisy"),
                         seed: Optional[int] = SeedOption, output_dir: Optional[str] = OutputOption):
    """Train the clean (non-robust) or noisy (robust) sprite classifier."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        fit_classifier(cfg, kind)


@app.command("train-denoiser")
def train_denoiser_cmd(config: str = ConfigOption, seed: Optional[int] = SeedOption,
                       output_dir: Optional[str] = OutputOption):
    """Train the sprite noise predictor."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        fit_denoiser(cfg)


@app.command("sample")
def sample_cmd(config: str = ConfigOption, seed: Optional[int] = SeedOption,
               output_dir: Optional[str] = OutputOption):
    """Run one guided sampling cell and save its samples."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        run_sample(cfg)


@app.command("grid")
def grid_cmd(config: str = ConfigOption, seed: Optional[int] = SeedOption,
             output_dir: Optional[str] = OutputOption):
    """Run the experiment grid."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        run_grid(cfg)


@app.command("sweep")
def sweep_cmd(config: str = ConfigOption,
              scale: Optional[List[float]] = typer.Option(None, "--scale", help="Guidance scale; repeat the flag."),
              seed: Optional[int] = SeedOption, output_dir: Optional[str] = OutputOption):
    """Evaluate one cell across guidance scales."""
    cfg = load_config(config, seed, output_dir)
    with _report_errors():
        run_scale_sweep(cfg, scale or None)


__all__ = [
    "GridCell",
    "GRID_CELLS",
    "GridCellError",
    "World",
    "CellResult",
    "resolve_cells",
    "load_world",
    "run_cell",
    "run_grid",
    "run_scale_sweep",
    "run_sample",
    "check_orderings",
    "check_sweep",
    "generate_data",
    "fit_classifier",
    "fit_denoiser",
    "load_config",
    "app",
]
