"""Diffusion variance schedule, forward noising and reverse-step coefficients.

Steps are 1-based at the API boundary (t = 1..T); arrays are stored 0-based.
ᾱ_0 := 1 so that t = 0 denotes clean data wherever a function permits it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

StepLike = Union[int, np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable β / α / ᾱ tables plus the fixed reverse variance σ_t²."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray
    variance_kind: str = "posterior"

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def _index(self, t: StepLike, allow_zero: bool = False):
        t_arr = np.asarray(t)
        if not np.issubdtype(t_arr.dtype, np.integer):
            raise ValueError(f"step index must be an integer, got {t!r}")
        low = 0 if allow_zero else 1
        if np.any(t_arr < low) or np.any(t_arr > self.num_steps):
            raise ValueError(f"step index {t!r} outside [{low}, {self.num_steps}]")
        return t_arr

    def alpha_bar_at(self, t: StepLike, allow_zero: bool = True):
        t_arr = self._index(t, allow_zero=allow_zero)
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t_arr]
        return float(out) if out.ndim == 0 else out

    def beta_at(self, t: StepLike):
        out = self.betas[self._index(t) - 1]
        return float(out) if np.ndim(out) == 0 else out

    def alpha_at(self, t: StepLike):
        out = self.alphas[self._index(t) - 1]
        return float(out) if np.ndim(out) == 0 else out

    def sigma2_at(self, t: StepLike):
        out = self.posterior_variances[self._index(t) - 1]
        return float(out) if np.ndim(out) == 0 else out


def linear_schedule(T: int, beta_start: float, beta_end: float, variance_kind: str = "posterior") -> NoiseSchedule:
    """Linear β schedule from ``beta_start`` to ``beta_end`` over ``T`` steps.

    ``variance_kind`` picks the fixed reverse variance: ``"posterior"`` uses
    β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t with β̃_1 = β_1, ``"beta"`` uses β_t.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if variance_kind not in {"posterior", "beta"}:
        raise ValueError(f"unknown variance_kind {variance_kind!r}")

    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if variance_kind == "beta":
        variances = betas.copy()
    else:
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        variances = (1.0 - prev) / (1.0 - alpha_bars) * betas
        variances[0] = betas[0]

    for arr in (betas, alphas, alpha_bars, variances):
        arr.setflags(write=False)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=variances,
        variance_kind=variance_kind,
    )


def _per_item(values, ndim: int):
    # broadcast a per-item coefficient (n,) against an (n, d...) batch
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch between x and {what}: {np.shape(a)} vs {np.shape(b)}")


def q_sample(x0, t: StepLike, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε; ``t`` may be a scalar or one step per item."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0, eps, "eps")
    abar = _per_item(sched.alpha_bar_at(t, allow_zero=False), x0.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def predict_x0(x_t, t: StepLike, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """One-step denoised estimate x̂0 = x_t/√ᾱ_t − √(1−ᾱ_t)·ε̂/√ᾱ_t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape(x_t, eps_hat, "eps_hat")
    abar = _per_item(sched.alpha_bar_at(t, allow_zero=False), x_t.ndim)
    sqrt_abar = np.sqrt(abar)
    return x_t / sqrt_abar - np.sqrt(1.0 - abar) * eps_hat / sqrt_abar


def reverse_mean(x_t, t: StepLike, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """Unguided DDPM mean μ_t = (x_t − β_t·ε̂/√(1−ᾱ_t)) / √α_t."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape(x_t, eps_hat, "eps_hat")
    abar = _per_item(sched.alpha_bar_at(t, allow_zero=False), x_t.ndim)
    beta = _per_item(sched.beta_at(t), x_t.ndim)
    alpha = _per_item(sched.alpha_at(t), x_t.ndim)
    return (x_t - beta * eps_hat / np.sqrt(1.0 - abar)) / np.sqrt(alpha)


def time_features(t: StepLike, sched: NoiseSchedule, n: int) -> np.ndarray:
    """(t/T, ᾱ_t) per item, shape (n, 2); t = 0 gives (0, 1)."""
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    abar = np.asarray(sched.alpha_bar_at(t_arr, allow_zero=True), dtype=np.float64).reshape(n)
    return np.stack([t_arr.astype(np.float64) / sched.num_steps, abar], axis=1)


__all__ = [
    "NoiseSchedule",
    "linear_schedule",
    "q_sample",
    "predict_x0",
    "reverse_mean",
    "time_features",
]
