"""Classifier-guided ancestral sampling.

The sampler assembles μ_t from a denoiser handle, obtains the classifier
gradient g_t through one of four paths (plain or x̂0-prediction, each raw or
ADAM-transformed), shifts the mean with the classic rule
μ′ = μ + s·σ²·g or the ℓ2-normalized rule μ′ = μ + s·σ²·‖μ‖·g/‖g‖, and
records everything the diagnostics need in a ``SamplerTrace``.

Handles are duck-typed:
  denoiser:   ``dim``, ``eps(x_t, t)``, optionally ``vjp(x_t, t, u)`` (J_εᵀ·u)
  classifier: ``kind``, ``num_classes``, ``log_posterior(x, t)``, ``grad(x, t, y)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .schedule import NoiseSchedule, predict_x0, reverse_mean

VARIANTS = ("classic_eq1", "normalized_eq2")
CLASSIFIER_KINDS = ("gmm_robust", "gmm_nonrobust", "mlp")
ADAM_ORDERS = ("before_normalization", "after_normalization")


@dataclass
class AdamState:
    """First/second moment estimates carried along one or more chains (one row per chain)."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 1.0
    eps_num: float = 1e-8

    @classmethod
    def zeros(cls, shape, beta1: float = 0.9, beta2: float = 0.999, eta: float = 1.0, eps_num: float = 1e-8):
        return cls(
            m=np.zeros(shape),
            v=np.zeros(shape),
            beta1=beta1,
            beta2=beta2,
            eta=eta,
            eps_num=eps_num,
        )


def adam_transform(g: np.ndarray, state: AdamState) -> np.ndarray:
    """Advance ``state`` by one step with gradient ``g`` and return η·m̂/(√v̂ + ε)."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} does not match ADAM state {state.m.shape}")
    state.step_count += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step_count)
    v_hat = state.v / (1.0 - state.beta2 ** state.step_count)
    return state.eta * m_hat / (np.sqrt(v_hat) + state.eps_num)


def _row_norm(a: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a, axis=-1, keepdims=True)


def _unit(g: np.ndarray) -> np.ndarray:
    norm = _row_norm(g)
    return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def normalized_term(mu_t, sigma2, g_t, s: float) -> np.ndarray:
    """s·σ²·‖μ‖·g/‖g‖ per row; rows with g = 0 get a zero term."""
    mu_t = np.asarray(mu_t, dtype=np.float64)
    g_t = np.asarray(g_t, dtype=np.float64)
    return s * sigma2 * _row_norm(mu_t) * _unit(g_t)


def classic_term(sigma2, g_t, s: float) -> np.ndarray:
    return s * sigma2 * np.asarray(g_t, dtype=np.float64)


def guided_mean_normalized(mu_t, sigma2, g_t, s: float) -> np.ndarray:
    """ℓ2-normalized guidance: μ′ = μ + s·σ²·‖μ‖·g/‖g‖ (no shift where g = 0)."""
    return np.asarray(mu_t, dtype=np.float64) + normalized_term(mu_t, sigma2, g_t, s)


def guided_mean_classic(mu_t, sigma2, g_t, s: float) -> np.ndarray:
    """Classic guidance: μ′ = μ + s·σ²·g."""
    return np.asarray(mu_t, dtype=np.float64) + classic_term(sigma2, g_t, s)


@dataclass
class GuidanceConfig:
    scale: float = 0.04
    variant: str = "normalized_eq2"
    use_x0_pred: bool = False
    use_adam: bool = False
    target_class: int = 0
    classifier_kind: str = "gmm_robust"
    num_chains: int = 64
    adam_order: str = "before_normalization"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eta: float = 1.0
    adam_eps: float = 1e-8
    checkpoints: Sequence[int] = ()

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")
        if self.num_chains < 1:
            raise ValueError(f"num_chains must be >= 1, got {self.num_chains}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.classifier_kind not in CLASSIFIER_KINDS:
            raise ValueError(f"classifier_kind must be one of {CLASSIFIER_KINDS}, got {self.classifier_kind!r}")
        if self.adam_order not in ADAM_ORDERS:
            raise ValueError(f"adam_order must be one of {ADAM_ORDERS}, got {self.adam_order!r}")


@dataclass
class WorldHandles:
    denoiser: Any
    classifier: Any = None


@dataclass
class SamplerTrace:
    """Per (step, chain) record of one guided run; steps in executed (descending t) order."""

    t_values: np.ndarray
    cond: np.ndarray
    cond_norm: np.ndarray
    grad_norm: np.ndarray
    applied_grad_norm: np.ndarray
    logp_target: np.ndarray
    mu_norm: np.ndarray
    sigma2: np.ndarray
    scale: float
    variant: str
    adam_steps: int = 0
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def num_steps(self) -> int:
        return int(self.t_values.shape[0])

    @property
    def num_chains(self) -> int:
        return int(self.cond.shape[1])


def chain_generators(rng, num_chains: int):
    """One independent generator per chain, spawned from a single seed."""
    if isinstance(rng, np.random.Generator):
        rng = int(rng.integers(2**63))
    seq = np.random.SeedSequence(rng)
    return [np.random.default_rng(child) for child in seq.spawn(num_chains)]


def _draw(gens, dim: int) -> np.ndarray:
    return np.stack([g.standard_normal(dim) for g in gens])


def _check_handles(handles: WorldHandles, cfg: GuidanceConfig):
    if handles.denoiser is None:
        raise ValueError("a denoiser handle is required for sampling")
    classifier = handles.classifier
    if classifier is None:
        raise ValueError("guided sampling needs a classifier handle")
    if classifier.kind != cfg.classifier_kind:
        raise ValueError(f"classifier handle is {classifier.kind!r} but config asks for {cfg.classifier_kind!r}")
    if not 0 <= cfg.target_class < classifier.num_classes:
        raise ValueError(f"target class {cfg.target_class} outside [0, {classifier.num_classes})")
    if cfg.use_x0_pred and not hasattr(handles.denoiser, "vjp"):
        raise ValueError("x0-prediction needs a denoiser handle with a vjp")


def classifier_grad(x_t, t: int, cfg: GuidanceConfig, handles: WorldHandles, sched: NoiseSchedule,
                    eps_hat: Optional[np.ndarray] = None) -> np.ndarray:
    """g_t = ∇_{x_t} log p(y | x_t), or through x̂0(x_t) when ``cfg.use_x0_pred``.

    The x̂0 path uses ∂x̂0/∂x_t = (I − √(1−ᾱ_t)·J_ε)/√ᾱ_t, so
    g_t = (u − √(1−ᾱ_t)·J_εᵀu)/√ᾱ_t with u = ∇ log p(y | x̂0).
    The classifier is always queried at the sampler's step t.
    """
    classifier = handles.classifier
    if classifier is None:
        raise ValueError("classifier handle missing")
    x_t = np.asarray(x_t, dtype=np.float64)
    if not cfg.use_x0_pred:
        return classifier.grad(x_t, t, cfg.target_class)
    denoiser = handles.denoiser
    if denoiser is None or not hasattr(denoiser, "vjp"):
        raise ValueError("x0-prediction needs a denoiser handle with a vjp")
    if eps_hat is None:
        eps_hat = denoiser.eps(x_t, t)
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    u = classifier.grad(x0_hat, t, cfg.target_class)
    abar = sched.alpha_bar_at(t, allow_zero=False)
    return (u - np.sqrt(1.0 - abar) * denoiser.vjp(x_t, t, u)) / np.sqrt(abar)


def sample_guided(handles: WorldHandles, cfg: GuidanceConfig, sched: NoiseSchedule, rng,
                  progress: bool = False) -> Tuple[np.ndarray, SamplerTrace]:
    """Run ``cfg.num_chains`` guided chains from x_T ~ N(0, I) down to x_0."""
    _check_handles(handles, cfg)
    denoiser, classifier = handles.denoiser, handles.classifier
    n, dim, T = cfg.num_chains, denoiser.dim, sched.num_steps
    y = cfg.target_class

    gens = chain_generators(rng, n)
    x = _draw(gens, dim)
    state = None
    if cfg.use_adam:
        state = AdamState.zeros(
            (n, dim), beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eta=cfg.adam_eta, eps_num=cfg.adam_eps
        )
    checkpoints = set(int(c) for c in cfg.checkpoints)

    t_values = np.arange(T, 0, -1)
    cond = np.zeros((T, n, dim))
    cond_norm = np.zeros((T, n))
    grad_norm = np.zeros((T, n))
    applied_norm = np.zeros((T, n))
    logp = np.zeros((T, n))
    mu_norm = np.zeros((T, n))
    sigma2s = np.zeros(T)
    snapshots: Dict[int, np.ndarray] = {}

    for i, t in enumerate(tqdm(t_values, desc="Guided sampling", disable=not progress)):
        t = int(t)
        if t in checkpoints:
            snapshots[t] = x.copy()
        eps = denoiser.eps(x, t)
        mu = reverse_mean(x, t, eps, sched)
        sigma2 = sched.sigma2_at(t)

        g_raw = classifier_grad(x, t, cfg, handles, sched, eps_hat=eps)
        x_in = predict_x0(x, t, eps, sched) if cfg.use_x0_pred else x
        logp[i] = classifier.log_posterior(x_in, t)[:, y]

        g = g_raw
        if state is not None:
            if cfg.adam_order == "after_normalization":
                g = adam_transform(_unit(g_raw), state)
            else:
                g = adam_transform(g_raw, state)

        # renormalized in either ADAM order
        if cfg.variant == "classic_eq1":
            c = classic_term(sigma2, g, cfg.scale)
        else:
            c = normalized_term(mu, sigma2, g, cfg.scale)

        x_next = mu + c
        if t > 1:
            x_next = x_next + np.sqrt(sigma2) * _draw(gens, dim)

        cond[i] = c
        cond_norm[i] = _row_norm(c)[:, 0]
        grad_norm[i] = _row_norm(g_raw)[:, 0]
        applied_norm[i] = _row_norm(g)[:, 0]
        mu_norm[i] = _row_norm(mu)[:, 0]
        sigma2s[i] = sigma2
        x = x_next

    trace = SamplerTrace(
        t_values=t_values,
        cond=cond,
        cond_norm=cond_norm,
        grad_norm=grad_norm,
        applied_grad_norm=applied_norm,
        logp_target=logp,
        mu_norm=mu_norm,
        sigma2=sigma2s,
        scale=cfg.scale,
        variant=cfg.variant,
        adam_steps=state.step_count if state is not None else 0,
        snapshots=snapshots,
    )
    return x, trace


def sample_unguided(denoiser, sched: NoiseSchedule, num_chains: int, rng, progress: bool = False) -> np.ndarray:
    """Plain ancestral sampling; same per-chain streams as ``sample_guided``."""
    if num_chains < 1:
        raise ValueError(f"num_chains must be >= 1, got {num_chains}")
    gens = chain_generators(rng, num_chains)
    x = _draw(gens, denoiser.dim)
    for t in tqdm(range(sched.num_steps, 0, -1), desc="Unguided sampling", disable=not progress):
        eps = denoiser.eps(x, t)
        x_next = reverse_mean(x, t, eps, sched)
        if t > 1:
            x_next = x_next + np.sqrt(sched.sigma2_at(t)) * _draw(gens, denoiser.dim)
        x = x_next
    return x


__all__ = [
    "AdamState",
    "adam_transform",
    "GuidanceConfig",
    "WorldHandles",
    "SamplerTrace",
    "classifier_grad",
    "guided_mean_normalized",
    "guided_mean_classic",
    "sample_guided",
    "sample_unguided",
    "chain_generators",
]
