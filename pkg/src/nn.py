"""Minimal dense network with hand-written forward and reverse passes.

One ``Mlp`` type serves as the trained classifier (class-logits head) and as
the trained noise predictor ε_θ (regression head). Time conditioning appends
the two features (t/T, ᾱ_t) to the input. Weights are stored (in, out) so a
layer is ``a @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from .guidance import AdamState, adam_transform
from .schedule import NoiseSchedule, q_sample, time_features

MODEL_FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "softplus")
HEADS = ("logits", "regression")
TIME_FEATURES = 2


class ModelFormatError(ValueError):
    """Model file has the wrong version or is missing arrays."""


@dataclass(eq=False)
class Mlp:
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: str = "tanh"
    head: str = "logits"
    time_conditioning: bool = False
    history: List[Dict[str, float]] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of weight/bias arrays does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match {expected}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.time_conditioning and self.layer_dims[0] <= TIME_FEATURES:
            raise ValueError("time-conditioned network needs data inputs besides the time features")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0] - (TIME_FEATURES if self.time_conditioning else 0)

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    noisy_training: bool = False
    early_stop_accuracy: float = 0.99
    hidden_dims: Sequence[int] = (64, 64)
    activation: str = "tanh"
    time_conditioning: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.early_stop_accuracy <= 1.0:
            raise ValueError(f"early_stop_accuracy must be in (0, 1], got {self.early_stop_accuracy}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator, activation: str = "tanh",
             head: str = "logits", time_conditioning: bool = False) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(layer_dims), weights, biases, activation, head, time_conditioning)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return expit(z)


def _assemble(net: Mlp, batch, t_features) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"expected a 2-D batch, got shape {batch.shape}")
    if batch.shape[1] != net.input_dim:
        raise ValueError(f"input width {batch.shape[1]} does not match network input {net.input_dim}")
    if net.time_conditioning:
        if t_features is None:
            raise ValueError("time-conditioned network needs t_features")
        t_features = np.asarray(t_features, dtype=np.float64)
        if t_features.shape != (batch.shape[0], TIME_FEATURES):
            raise ValueError(f"t_features shape {t_features.shape} does not match batch")
        return np.concatenate([batch, t_features], axis=1)
    if t_features is not None:
        raise ValueError("network is not time-conditioned but t_features were given")
    return batch


def _forward_cache(net: Mlp, inputs: np.ndarray):
    acts, pre = [inputs], []
    a = inputs
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre.append(z)
        a = z if i == last else _activate(z, net.hidden_activation)
        acts.append(a)
    return acts, pre


def _backward(net: Mlp, acts, pre, grad_out: np.ndarray, with_params: bool = True):
    """Reverse pass from an output cotangent; returns (input grad, weight grads, bias grads)."""
    grad_w: List[np.ndarray] = [None] * len(net.weights)
    grad_b: List[np.ndarray] = [None] * len(net.weights)
    delta = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * _activate_grad(pre[i], net.hidden_activation)
        if with_params:
            grad_w[i] = acts[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    return delta, grad_w, grad_b


def forward(net: Mlp, batch, t_features=None) -> np.ndarray:
    """Raw outputs (logits or ε̂); log-softmax is applied by callers."""
    acts, _ = _forward_cache(net, _assemble(net, batch, t_features))
    return acts[-1]


def vjp_input(net: Mlp, x, t_features, cotangent) -> np.ndarray:
    """Jᵀ·cotangent for the input Jacobian J at ``x`` (time features excluded)."""
    inputs = _assemble(net, x, t_features)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (inputs.shape[0], net.output_dim):
        raise ValueError(f"cotangent shape {cotangent.shape} does not match output ({inputs.shape[0]}, {net.output_dim})")
    acts, pre = _forward_cache(net, inputs)
    grad_in, _, _ = _backward(net, acts, pre, cotangent, with_params=False)
    return grad_in[:, :net.input_dim]


def _one_hot(y, n: int, k: int) -> np.ndarray:
    y = np.broadcast_to(np.asarray(y), (n,))
    out = np.zeros((n, k))
    out[np.arange(n), y] = 1.0
    return out


def input_gradient(net: Mlp, x, t_features, y, objective: str = "log_prob") -> np.ndarray:
    """∇_x log softmax(f(x))[y] by reverse mode; ``y`` is one class or one per row."""
    if objective != "log_prob" or net.head != "logits":
        raise ValueError(f"objective {objective!r} is not defined for a {net.head!r} head")
    inputs = _assemble(net, x, t_features)
    acts, pre = _forward_cache(net, inputs)
    logits = acts[-1]
    cotangent = _one_hot(y, logits.shape[0], net.output_dim) - softmax(logits, axis=1)
    grad_in, _, _ = _backward(net, acts, pre, cotangent, with_params=False)
    return grad_in[:, :net.input_dim]


def classifier_accuracy(net: Mlp, x, y, t_features=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot score an empty set")
    pred = np.argmax(forward(net, x, t_features), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def _classifier_features(net: Mlp, t, sched: NoiseSchedule, n: int):
    return time_features(t, sched, n) if net.time_conditioning else None


def noisy_accuracy(net: Mlp, x, y, sched: NoiseSchedule, seed: int = 0) -> float:
    """Accuracy on q_sample-noised inputs with a uniform step per item."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.num_steps + 1, size=x.shape[0])
    noisy = q_sample(x, t, rng.standard_normal(x.shape), sched)
    return classifier_accuracy(net, noisy, y, _classifier_features(net, t, sched, x.shape[0]))


def _adam_states(net: Mlp, lr: float) -> List[AdamState]:
    return [AdamState.zeros(p.shape, eta=lr) for p in net.weights + net.biases]


def _apply(net: Mlp, states: List[AdamState], grad_w, grad_b):
    params = net.weights + net.biases
    for p, g, state in zip(params, list(grad_w) + list(grad_b), states):
        p -= adam_transform(g, state)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_classifier(data: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig, sched: NoiseSchedule,
                     progress: bool = False) -> Mlp:
    """Cross-entropy training with ADAM on a seeded 90/10 split.

    With ``cfg.noisy_training`` every example is re-noised each epoch at a fresh
    uniform step; validation then runs on a fixed noisy copy of the held-out set.
    """
    x, y = np.asarray(data[0], dtype=np.float64), np.asarray(data[1]).astype(np.int64)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("classifier training needs at least two classes")
    num_classes = int(classes.max()) + 1
    stratify = y if counts.min() >= 2 else None
    x_train, x_val, y_train, y_val = train_test_split(
        x, y, test_size=0.1, random_state=cfg.seed, stratify=stratify
    )

    rng = np.random.default_rng(cfg.seed)
    extra = TIME_FEATURES if cfg.time_conditioning else 0
    dims = [x.shape[1] + extra, *cfg.hidden_dims, num_classes]
    net = init_mlp(dims, rng, cfg.activation, "logits", cfg.time_conditioning)
    states = _adam_states(net, cfg.learning_rate)

    if cfg.noisy_training:
        t_val = rng.integers(1, sched.num_steps + 1, size=x_val.shape[0])
        x_val = q_sample(x_val, t_val, rng.standard_normal(x_val.shape), sched)
        val_features = _classifier_features(net, t_val, sched, x_val.shape[0])
    else:
        val_features = _classifier_features(net, 0, sched, x_val.shape[0])

    epochs = tqdm(range(cfg.epochs), desc="Training classifier", disable=not progress)
    for epoch in epochs:
        losses = []
        for idx in _batches(x_train.shape[0], cfg.batch_size, rng):
            xb, yb = x_train[idx], y_train[idx]
            if cfg.noisy_training:
                t = rng.integers(1, sched.num_steps + 1, size=idx.size)
                xb = q_sample(xb, t, rng.standard_normal(xb.shape), sched)
            else:
                t = 0
            inputs = _assemble(net, xb, _classifier_features(net, t, sched, idx.size))
            acts, pre = _forward_cache(net, inputs)
            logp = log_softmax(acts[-1], axis=1)
            losses.append(-float(np.mean(logp[np.arange(idx.size), yb])))
            grad_out = (np.exp(logp) - _one_hot(yb, idx.size, num_classes)) / idx.size
            _, grad_w, grad_b = _backward(net, acts, pre, grad_out)
            _apply(net, states, grad_w, grad_b)
        val_acc = classifier_accuracy(net, x_val, y_val, val_features)
        net.history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_accuracy": val_acc})
        epochs.set_postfix(loss=f"{np.mean(losses):.4f}", val_acc=f"{val_acc:.3f}")
        if val_acc >= cfg.early_stop_accuracy:
            break
    return net


def train_denoiser(data: np.ndarray, cfg: TrainConfig, sched: NoiseSchedule, progress: bool = False) -> Mlp:
    """Simplified noise-prediction loss ‖ε − ε_θ(x_t, t)‖² over uniform t."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("denoiser training needs a non-empty (n, d) array")
    rng = np.random.default_rng(cfg.seed)
    dims = [x.shape[1] + TIME_FEATURES, *cfg.hidden_dims, x.shape[1]]
    net = init_mlp(dims, rng, cfg.activation, "regression", time_conditioning=True)
    states = _adam_states(net, cfg.learning_rate)

    epochs = tqdm(range(cfg.epochs), desc="Training denoiser", disable=not progress)
    for epoch in epochs:
        losses = []
        for idx in _batches(x.shape[0], cfg.batch_size, rng):
            t = rng.integers(1, sched.num_steps + 1, size=idx.size)
            eps = rng.standard_normal((idx.size, x.shape[1]))
            inputs = _assemble(net, q_sample(x[idx], t, eps, sched), time_features(t, sched, idx.size))
            acts, pre = _forward_cache(net, inputs)
            resid = acts[-1] - eps
            losses.append(float(np.mean(resid**2)))
            _, grad_w, grad_b = _backward(net, acts, pre, 2.0 * resid / resid.size)
            _apply(net, states, grad_w, grad_b)
        net.history.append({"epoch": epoch + 1, "loss": float(np.mean(losses))})
        epochs.set_postfix(loss=f"{np.mean(losses):.4f}")
    return net


def save_model(net: Mlp, path: str) -> None:
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "hidden_activation": net.hidden_activation,
        "head": net.head,
        "time_conditioning": net.time_conditioning,
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"] = np.ascontiguousarray(w)
        arrays[f"b{i}"] = np.ascontiguousarray(b)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_model(path: str) -> Mlp:
    with np.load(path, allow_pickle=False) as payload:
        if "meta" not in payload:
            raise ModelFormatError(f"{path}: missing meta entry")
        meta = json.loads(str(payload["meta"]))
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"{path}: format version {meta.get('format_version')} != {MODEL_FORMAT_VERSION}"
            )
        n_layers = len(meta["layer_dims"]) - 1
        try:
            weights = [payload[f"W{i}"].astype(np.float64) for i in range(n_layers)]
            biases = [payload[f"b{i}"].astype(np.float64) for i in range(n_layers)]
        except KeyError as e:
            raise ModelFormatError(f"{path}: missing array {e}") from e
    return Mlp(
        tuple(meta["layer_dims"]),
        weights,
        biases,
        meta["hidden_activation"],
        meta["head"],
        bool(meta["time_conditioning"]),
    )


class MlpDenoiser:
    """Trained ε_θ handle."""

    def __init__(self, net: Mlp, sched: NoiseSchedule):
        if net.head != "regression" or not net.time_conditioning:
            raise ValueError("denoiser needs a time-conditioned regression network")
        if net.input_dim != net.output_dim:
            raise ValueError("denoiser output width must equal its data width")
        self.net = net
        self.sched = sched

    @property
    def dim(self) -> int:
        return self.net.output_dim

    def eps(self, x_t: np.ndarray, t: int) -> np.ndarray:
        return forward(self.net, x_t, time_features(t, self.sched, np.shape(x_t)[0]))

    def vjp(self, x_t: np.ndarray, t: int, u: np.ndarray) -> np.ndarray:
        return vjp_input(self.net, x_t, time_features(t, self.sched, np.shape(x_t)[0]), u)


class MlpClassifier:
    """Trained classifier handle; time features are passed only if the network was trained with them."""

    kind = "mlp"

    def __init__(self, net: Mlp, sched: NoiseSchedule):
        if net.head != "logits":
            raise ValueError("classifier handle needs a logits network")
        self.net = net
        self.sched = sched

    @property
    def num_classes(self) -> int:
        return self.net.output_dim

    def _features(self, x, t: int) -> Optional[np.ndarray]:
        return _classifier_features(self.net, t, self.sched, np.shape(x)[0])

    def log_posterior(self, x: np.ndarray, t: int) -> np.ndarray:
        return log_softmax(forward(self.net, x, self._features(x, t)), axis=1)

    def grad(self, x: np.ndarray, t: int, y: int) -> np.ndarray:
        return input_gradient(self.net, x, self._features(x, t), y)


__all__ = [
    "Mlp",
    "TrainConfig",
    "ModelFormatError",
    "init_mlp",
    "forward",
    "input_gradient",
    "vjp_input",
    "classifier_accuracy",
    "noisy_accuracy",
    "train_classifier",
    "train_denoiser",
    "save_model",
    "load_model",
    "MlpDenoiser",
    "MlpClassifier",
]
