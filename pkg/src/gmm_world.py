"""Analytic class-conditional Gaussian-mixture world.

Every noised marginal of a Gaussian mixture stays a Gaussian mixture:
q_t(x | y) = N(√ᾱ_t·m_y, ᾱ_t·S_y + (1 − ᾱ_t)·I). This module evaluates those
densities, the exact Bayes posteriors built from them (robust: at the true
noise level, non-robust: always at t = 0), their input gradients, the exact
score / ε and the posterior mean E[x0 | x_t]. It is the oracle every guidance
experiment is checked against.

Arrays are batched as (n, d); single points of shape (d,) are accepted and
returned in the same shape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

from .schedule import NoiseSchedule

LOG_2PI = np.log(2.0 * np.pi)
KINDS = ("robust", "nonrobust")


@dataclass(frozen=True, eq=False)
class ClassGmm:
    """Class priors π_y with one Gaussian N(m_y, S_y) per class.

    ``covariances`` is either (K, d, d) full matrices or (K, d) per-class
    variances of a diagonal S_y; the diagonal form never builds a d×d matrix.
    """

    priors: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _factors: Dict[float, List[Tuple[np.ndarray, float]]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )
    _lock: Any = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covariances, dtype=np.float64)
        k, d = means.shape
        if priors.shape != (k,) or covs.shape not in {(k, d), (k, d, d)}:
            raise ValueError(
                f"inconsistent shapes: priors {priors.shape}, means {means.shape}, covariances {covs.shape}"
            )
        if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ValueError(f"priors must be positive and sum to 1, got {priors.tolist()}")
        if covs.ndim == 2:
            if np.any(covs <= 0):
                raise ValueError("diagonal covariances must be strictly positive")
        else:
            for y in range(k):
                if np.max(np.abs(covs[y] - covs[y].T)) > 1e-12:
                    raise ValueError(f"covariance of class {y} is not symmetric")
                if np.linalg.eigvalsh(covs[y]).min() <= 0:
                    raise ValueError(f"covariance of class {y} is not positive definite")
        for name, arr in (("priors", priors), ("means", means), ("covariances", covs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_classes(self) -> int:
        return int(self.priors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def diagonal(self) -> bool:
        return self.covariances.ndim == 2

    def covariance(self, y: int) -> np.ndarray:
        """S_y as a dense d×d matrix whatever the storage form."""
        return np.diag(self.covariances[y]) if self.diagonal else np.array(self.covariances[y])

    def factors(self, abar: float) -> List[Tuple[np.ndarray, float]]:
        """Factor and log-determinant of C_y = ᾱ·S_y + (1−ᾱ)·I per class (memoized).

        The factor is the lower Cholesky matrix, or the variance vector of C_y
        when the covariances are diagonal.
        """
        key = float(abar)
        cached = self._factors.get(key)
        if cached is not None:
            return cached
        with self._lock:
            cached = self._factors.get(key)
            if cached is None:
                cached = [self._factor(cov, key) for cov in self.covariances]
                self._factors[key] = cached
        return cached

    def _factor(self, cov: np.ndarray, abar: float) -> Tuple[np.ndarray, float]:
        if self.diagonal:
            effective = abar * cov + (1.0 - abar)
            return effective, float(np.sum(np.log(effective)))
        effective = abar * cov + (1.0 - abar) * np.eye(self.dim)
        try:
            chol = cholesky(effective, lower=True)
        except np.linalg.LinAlgError as e:
            raise ValueError(f"effective covariance at alpha_bar={abar} is not positive definite") from e
        return chol, 2.0 * float(np.sum(np.log(np.diag(chol))))


def default_world(extra_dims: int = 0, texture_dims: int = 0,
                  texture_variances: Optional[Sequence[float]] = None) -> ClassGmm:
    """Four equal-prior classes on a square of radius 3, covariances 0.15·I.

    ``extra_dims`` appends zero-mean nuisance coordinates with the same variance
    for every class. ``texture_dims`` inserts, right after the plane, zero-mean
    coordinates whose variance depends on the class (``texture_variances``, one
    value per class): a faint class signature that noise swamps.
    """
    if extra_dims < 0 or texture_dims < 0:
        raise ValueError(f"dimension counts must be >= 0, got {extra_dims}, {texture_dims}")
    angles = np.pi / 4 + np.arange(4) * np.pi / 2
    plane = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    d = 2 + int(texture_dims) + int(extra_dims)
    means = np.zeros((4, d))
    means[:, :2] = plane
    variances = np.full((4, d), 0.15)
    if texture_dims:
        if texture_variances is None or len(texture_variances) != 4:
            raise ValueError("texture_variances needs one value per class (4)")
        variances[:, 2:2 + texture_dims] = np.asarray(texture_variances, dtype=np.float64)[:, None]
    return ClassGmm(priors=np.full(4, 0.25), means=means, covariances=variances)


def gmm_to_dict(gmm: ClassGmm) -> Dict[str, Any]:
    return {
        "gmm_priors": gmm.priors.tolist(),
        "gmm_means": gmm.means.tolist(),
        "gmm_covariances": gmm.covariances.tolist(),
    }


def gmm_from_dict(raw: Dict[str, Any]) -> ClassGmm:
    return ClassGmm(
        priors=np.asarray(raw["gmm_priors"], dtype=np.float64),
        means=np.asarray(raw["gmm_means"], dtype=np.float64),
        covariances=np.asarray(raw["gmm_covariances"], dtype=np.float64),
    )


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _scale_noise(gmm: ClassGmm, y: int, z: np.ndarray) -> np.ndarray:
    if gmm.diagonal:
        return z * np.sqrt(gmm.covariances[y])
    return z @ cholesky(gmm.covariances[y], lower=True).T


def _solve(gmm: ClassGmm, factor: np.ndarray, v: np.ndarray) -> np.ndarray:
    """C_y⁻¹ v for each row of ``v``."""
    if gmm.diagonal:
        return v / factor
    return cho_solve((factor, True), v.T).T


def sample_data(gmm: ClassGmm, n: int, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labeled clean points (x0, y); deterministic given the seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = _as_rng(rng)
    labels = rng.choice(gmm.num_classes, size=n, p=gmm.priors)
    z = rng.standard_normal((n, gmm.dim))
    points = np.empty((n, gmm.dim))
    for y in range(gmm.num_classes):
        mask = labels == y
        points[mask] = gmm.means[y] + _scale_noise(gmm, y, z[mask])
    return points, labels


def sample_class(gmm: ClassGmm, y: int, n: int, rng) -> np.ndarray:
    """``n`` clean points of class ``y`` only."""
    if not 0 <= y < gmm.num_classes:
        raise ValueError(f"class {y} outside [0, {gmm.num_classes})")
    rng = _as_rng(rng)
    return gmm.means[y] + _scale_noise(gmm, y, rng.standard_normal((n, gmm.dim)))


def _batch(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _abar(t: int, sched: NoiseSchedule, allow_zero: bool = True) -> float:
    if sched is None:
        if t != 0:
            raise ValueError("a schedule is required for t > 0")
        return 1.0
    return float(sched.alpha_bar_at(t, allow_zero=allow_zero))


def _class_terms(gmm: ClassGmm, x: np.ndarray, abar: float):
    """Per-class log N(x; √ᾱ m_y, C_y) (n, K) and precision-weighted residuals C_y⁻¹ r (K, n, d)."""
    n = x.shape[0]
    logdens = np.empty((n, gmm.num_classes))
    prec_res = np.empty((gmm.num_classes, n, gmm.dim))
    for y, (factor, logdet) in enumerate(gmm.factors(abar)):
        resid = x - np.sqrt(abar) * gmm.means[y]
        prec_res[y] = _solve(gmm, factor, resid)
        if gmm.diagonal:
            maha = np.sum(resid * prec_res[y], axis=1)
        else:
            maha = np.sum(solve_triangular(factor, resid.T, lower=True) ** 2, axis=0)
        logdens[:, y] = -0.5 * (gmm.dim * LOG_2PI + logdet + maha)
    return logdens, prec_res


def _log_softmax(a: np.ndarray) -> np.ndarray:
    return a - logsumexp(a, axis=1, keepdims=True)


def noised_class_log_density(gmm: ClassGmm, x, t: int, y: int, sched: NoiseSchedule) -> np.ndarray:
    """log q_t(x | y); t = 0 is the clean class density."""
    xb, single = _batch(x)
    logdens, _ = _class_terms(gmm, xb, _abar(t, sched))
    out = logdens[:, y]
    return out[0] if single else out


def robust_log_posterior(gmm: ClassGmm, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """log p(y | x_t) by Bayes' rule over the noised class densities, shape (n, K)."""
    xb, single = _batch(x_t)
    logdens, _ = _class_terms(gmm, xb, _abar(t, sched))
    out = _log_softmax(np.log(gmm.priors) + logdens)
    return out[0] if single else out


def nonrobust_log_posterior(gmm: ClassGmm, x, t: int = 0, sched: NoiseSchedule = None) -> np.ndarray:
    """Clean-data Bayes posterior evaluated on ``x`` whatever its noise level."""
    return robust_log_posterior(gmm, x, 0, None)


def grad_log_posterior(gmm: ClassGmm, x, t: int, y: int, kind: str, sched: NoiseSchedule) -> np.ndarray:
    """∇_x log p(y | x) for the robust (noise-aware) or non-robust posterior."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    xb, single = _batch(x)
    abar = _abar(t, sched) if kind == "robust" else 1.0
    logdens, prec_res = _class_terms(gmm, xb, abar)
    post = np.exp(_log_softmax(np.log(gmm.priors) + logdens))
    # ∇a_k = −C_k⁻¹ r_k ; ∇ log p(y|x) = Σ_k p_k (∇a_y − ∇a_k), exactly zero where classes agree
    out = np.einsum("nk,knd->nd", post, prec_res - prec_res[y][None])
    return out[0] if single else out


def exact_score(gmm: ClassGmm, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """∇ log q_t(x_t): responsibility-weighted per-class Gaussian scores."""
    xb, single = _batch(x_t)
    abar = _abar(t, sched, allow_zero=False)
    logdens, prec_res = _class_terms(gmm, xb, abar)
    post = np.exp(_log_softmax(np.log(gmm.priors) + logdens))
    out = -np.einsum("nk,knd->nd", post, prec_res)
    return out[0] if single else out


def exact_score_hvp(gmm: ClassGmm, x_t, t: int, u, sched: NoiseSchedule) -> np.ndarray:
    """Hessian of log q_t applied to ``u`` (the score Jacobian is symmetric).

    H = −Σ p_k C_k⁻¹ + Σ p_k s_k s_kᵀ − s sᵀ with s_k = −C_k⁻¹ r_k, s = Σ p_k s_k.
    """
    xb, single = _batch(x_t)
    ub, _ = _batch(u)
    abar = _abar(t, sched, allow_zero=False)
    logdens, prec_res = _class_terms(gmm, xb, abar)
    post = np.exp(_log_softmax(np.log(gmm.priors) + logdens))
    scores = -prec_res
    mix = np.einsum("nk,knd->nd", post, scores)
    out = np.zeros_like(ub)
    for y, (factor, _) in enumerate(gmm.factors(abar)):
        prec_u = _solve(gmm, factor, ub)
        proj = np.sum(scores[y] * ub, axis=1, keepdims=True)
        out += post[:, y:y + 1] * (-prec_u + scores[y] * proj)
    out -= mix * np.sum(mix * ub, axis=1, keepdims=True)
    return out[0] if single else out


def exact_eps(gmm: ClassGmm, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """ε = −√(1−ᾱ_t) · ∇ log q_t(x_t); a training-free noise predictor."""
    abar = _abar(t, sched, allow_zero=False)
    return -np.sqrt(1.0 - abar) * exact_score(gmm, x_t, t, sched)


def posterior_mean_x0(gmm: ClassGmm, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """E[x0 | x_t] = Σ_y p(y|x_t) · (m_y + √ᾱ S_y C_y⁻¹ (x_t − √ᾱ m_y))."""
    xb, single = _batch(x_t)
    abar = _abar(t, sched, allow_zero=False)
    logdens, prec_res = _class_terms(gmm, xb, abar)
    post = np.exp(_log_softmax(np.log(gmm.priors) + logdens))
    out = np.zeros_like(xb)
    for y in range(gmm.num_classes):
        if gmm.diagonal:
            spread = prec_res[y] * gmm.covariances[y]
        else:
            spread = prec_res[y] @ gmm.covariances[y].T
        cond = gmm.means[y] + np.sqrt(abar) * spread
        out += post[:, y:y + 1] * cond
    return out[0] if single else out


class GmmDenoiser:
    """Exact ε-predictor handle for the analytic world."""

    def __init__(self, gmm: ClassGmm, sched: NoiseSchedule):
        self.gmm = gmm
        self.sched = sched

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return exact_eps(self.gmm, x_t, t, self.sched)

    def vjp(self, x_t: np.ndarray, t: int, u: np.ndarray) -> np.ndarray:
        # J_ε = −√(1−ᾱ)·H and H is symmetric
        abar = self.sched.alpha_bar_at(t, allow_zero=False)
        return -np.sqrt(1.0 - abar) * exact_score_hvp(self.gmm, x_t, t, u, self.sched)


class GmmClassifier:
    """Exact Bayes classifier handle; ``robust`` sees the noise level, ``nonrobust`` does not."""

    def __init__(self, gmm: ClassGmm, sched: NoiseSchedule, kind: str):
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        self.gmm = gmm
        self.sched = sched
        self.kind = f"gmm_{kind}"
        self._posterior_kind = kind

    @property
    def num_classes(self) -> int:
        return self.gmm.num_classes

    def log_posterior(self, x: np.ndarray, t: int) -> np.ndarray:
        if self._posterior_kind == "robust":
            return robust_log_posterior(self.gmm, x, t, self.sched)
        return nonrobust_log_posterior(self.gmm, x)

    def grad(self, x: np.ndarray, t: int, y: int) -> np.ndarray:
        return grad_log_posterior(self.gmm, x, t, y, self._posterior_kind, self.sched)


__all__ = [
    "ClassGmm",
    "default_world",
    "gmm_to_dict",
    "gmm_from_dict",
    "sample_data",
    "sample_class",
    "noised_class_log_density",
    "robust_log_posterior",
    "nonrobust_log_posterior",
    "grad_log_posterior",
    "exact_score",
    "exact_score_hvp",
    "exact_eps",
    "posterior_mean_x0",
    "GmmDenoiser",
    "GmmClassifier",
]
