"""Diagnostics for guided runs: step-to-step cosine similarity of the
conditioning terms, Fréchet distance between sample sets, guidance accuracy,
and the SVG figures built from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.linalg import eigh  # noqa: E402

from .guidance import SamplerTrace  # noqa: E402

EIG_FLOOR = 1e-10
COV_JITTER = 1e-6
SVG_SALT = "gradcheck"


@dataclass
class CosineSeries:
    """Batch statistics of cos(c_t, c_{t−1}); one entry per adjacent step pair.

    ``t`` labels each pair by its later step (t−1 of the pair), in executed
    order T−1 … 1. ``mean`` is NaN where no chain had a defined cosine.
    """

    t: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_valid: np.ndarray

    def __len__(self) -> int:
        return int(self.t.shape[0])


def step_cosines(cond: np.ndarray) -> np.ndarray:
    """Cosine between consecutive conditioning terms, shape (S−1, chains).

    Pairs where either term is exactly zero are NaN.
    """
    cond = np.asarray(cond, dtype=np.float64)
    if cond.ndim == 2:
        cond = cond[:, :, None]
    if cond.ndim != 3 or cond.shape[0] < 2:
        raise ValueError("need a (steps >= 2, chains, dim) conditioning array")
    prev, curr = cond[:-1], cond[1:]
    dots = np.sum(prev * curr, axis=-1)
    norms = np.linalg.norm(prev, axis=-1) * np.linalg.norm(curr, axis=-1)
    cos = np.full(dots.shape, np.nan)
    valid = norms > 0
    cos[valid] = dots[valid] / norms[valid]
    return np.clip(cos, -1.0, 1.0)


def cosine_series(trace: SamplerTrace) -> CosineSeries:
    if trace.num_steps < 2:
        raise ValueError(f"cosine series needs at least two steps, trace has {trace.num_steps}")
    cos = step_cosines(trace.cond)
    valid = ~np.isnan(cos)
    n_valid = valid.sum(axis=1)
    mean = np.full(cos.shape[0], np.nan)
    std = np.full(cos.shape[0], np.nan)
    has = n_valid > 0
    mean[has] = np.nanmean(cos[has], axis=1)
    std[has] = np.nanstd(cos[has], axis=1)
    return CosineSeries(t=trace.t_values[1:].copy(), mean=mean, std=std, n_valid=n_valid)


def window_mean(series: CosineSeries, start: float, stop: float) -> float:
    """Mean of the per-step batch means over a fraction window of the trajectory.

    0 is the start of sampling (t near T) and 1 its end (t = 1); e.g. the
    middle third is ``(1/3, 2/3)`` and the final half ``(0.5, 1.0)``.
    """
    if not 0.0 <= start < stop <= 1.0:
        raise ValueError(f"window must satisfy 0 <= start < stop <= 1, got ({start}, {stop})")
    n = len(series)
    lo, hi = int(round(start * n)), int(round(stop * n))
    values = series.mean[lo:max(hi, lo + 1)]
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else float("nan")


def series_frame(series: CosineSeries) -> pd.DataFrame:
    return pd.DataFrame({"t": series.t, "mean": series.mean, "std": series.std, "n_valid": series.n_valid})


def trace_frame(trace: SamplerTrace) -> pd.DataFrame:
    """One row per (chain, t), chains in index order, t descending."""
    steps, chains = trace.num_steps, trace.num_chains
    cos_prev = np.full((steps, chains), np.nan)
    if steps >= 2:
        cos_prev[1:] = step_cosines(trace.cond)

    def by_chain(a: np.ndarray) -> np.ndarray:
        return np.asarray(a).T.reshape(-1)

    return pd.DataFrame({
        "chain": np.repeat(np.arange(chains), steps),
        "t": np.tile(trace.t_values, chains),
        "cond_norm": by_chain(trace.cond_norm),
        "grad_norm": by_chain(trace.grad_norm),
        "applied_grad_norm": by_chain(trace.applied_grad_norm),
        "logp_target": by_chain(trace.logp_target),
        "mu_norm": by_chain(trace.mu_norm),
        "sigma2": np.tile(trace.sigma2, chains),
        "cos_prev": by_chain(cos_prev),
    })


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("Fréchet distance needs a non-empty (n, d) point set")
    return x


def _fit_gaussian(x: np.ndarray):
    mu = x.mean(axis=0)
    d = x.shape[1]
    if x.shape[0] < 2:
        cov = np.zeros((d, d))
    else:
        cov = np.atleast_2d(np.cov(x, rowvar=False))
    if np.linalg.matrix_rank(cov) < d:
        cov = cov + COV_JITTER * np.eye(d)
    return mu, cov


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = eigh(a)
    w = np.where(w < EIG_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(set_a, set_b) -> float:
    """d² between Gaussians fitted to two point sets.

    ‖μ1−μ2‖² + Tr Σ1 + Tr Σ2 − 2·Tr (Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}; the trace of
    that symmetric root equals Tr (Σ1Σ2)^{1/2}.
    """
    a, b = _as_points(set_a), _as_points(set_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    mu1, cov1 = _fit_gaussian(a)
    mu2, cov2 = _fit_gaussian(b)
    root1 = _psd_sqrt(cov1)
    middle = root1 @ cov2 @ root1
    w = eigh((middle + middle.T) / 2.0, eigvals_only=True)
    tr_covmean = float(np.sum(np.sqrt(np.where(w < EIG_FLOOR, 0.0, w))))
    diff = mu1 - mu2
    d2 = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_covmean)
    return max(d2, 0.0)


def guidance_accuracy(samples, y: int, judge) -> float:
    """Fraction of samples the judge assigns to ``y`` at t = 0 (argmax, lowest index on ties)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("guidance accuracy needs a non-empty (n, d) sample set")
    pred = np.argmax(judge.log_posterior(samples, 0), axis=1)
    return float(np.mean(pred == y))


def _save_svg(fig, path: str):
    with plt.rc_context({"svg.hashsalt": SVG_SALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_cosine_series(series_by_label: Dict[str, CosineSeries], path: str, title: str = "") -> None:
    """Mean cosine against t with a ±std band per labelled series."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, series in series_by_label.items():
        line, = ax.plot(series.t, series.mean, label=label, linewidth=1.2)
        ax.fill_between(series.t, series.mean - series.std, series.mean + series.std,
                        color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlim(max(float(s.t.max()) for s in series_by_label.values()), 1)
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0.0, color="grey", linewidth=0.5)
    ax.set_xlabel("t")
    ax.set_ylabel("cos(c_t, c_t-1)")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    _save_svg(fig, path)


def plot_samples_2d(samples, path: str, reference: Optional[np.ndarray] = None, title: str = "") -> None:
    """Scatter of the first two coordinates, optionally over a reference cloud."""
    samples = np.asarray(samples)
    fig, ax = plt.subplots(figsize=(5, 5))
    if reference is not None:
        reference = np.asarray(reference)
        ax.scatter(reference[:, 0], reference[:, 1], s=4, color="lightgrey", label="data")
    ax.scatter(samples[:, 0], samples[:, 1], s=8, color="tab:red", label="samples")
    ax.set_aspect("equal", adjustable="datalim")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save_svg(fig, path)


def plot_scale_sweep(table: pd.DataFrame, path: str, title: str = "") -> None:
    """FID and accuracy against the guidance scale (symlog axis so s = 0 shows)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table["scale"], table["fid"], marker="o", color="tab:blue")
    ax.set_xscale("symlog", linthresh=0.01)
    ax.set_xlabel("guidance scale s")
    ax.set_ylabel("FID", color="tab:blue")
    acc_ax = ax.twinx()
    acc_ax.plot(table["scale"], table["accuracy"], marker="s", color="tab:orange")
    acc_ax.set_ylim(0.0, 1.05)
    acc_ax.set_ylabel("accuracy", color="tab:orange")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)


__all__ = [
    "CosineSeries",
    "step_cosines",
    "cosine_series",
    "window_mean",
    "series_frame",
    "trace_frame",
    "frechet_distance",
    "guidance_accuracy",
    "plot_cosine_series",
    "plot_samples_2d",
    "plot_scale_sweep",
]
