import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class ConfigError(ValueError):
    """Malformed experiment configuration (unknown key, bad type or value)."""


class Config:
    """
    Environment settings for the GradCheck laboratory.
    """
    def __init__(self):
        self.OUTPUT_DIR = os.getenv(
            "GRADCHECK_OUTPUT_DIR",
            os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "output"),
        )
        self.SHOW_PROGRESS = os.getenv("GRADCHECK_PROGRESS", "1").lower() not in {"0", "false", "no"}


WORLDS = {"gmm", "sprites"}
VARIANTS = {"classic_eq1", "normalized_eq2"}
VARIANCE_KINDS = {"posterior", "beta"}
ADAM_ORDERS = {"before_normalization", "after_normalization"}


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration, one flat YAML mapping on disk."""

    world: str = "gmm"
    # schedule
    steps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    variance_kind: str = "posterior"
    # guidance
    scale: float = 0.04
    variant: str = "normalized_eq2"
    target_class: int = 0
    num_chains: int = 64
    adam_order: str = "before_normalization"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eta: float = 1.0
    adam_eps: float = 1e-8
    checkpoints: List[int] = field(default_factory=list)
    # grid
    cells: List[str] = field(default_factory=lambda: ["all"])
    seed: int = 0
    repeats: int = 1
    output_dir: str = ""
    plots: bool = True
    save_samples: bool = True
    record_wall_clock: bool = False
    fid_reference_count: int = 64
    fid_dims: int = 0
    sweep_scales: List[float] = field(default_factory=lambda: [0.0, 0.01, 0.04, 0.16, 0.64])
    sweep_cell: str = "robust-plain"
    sample_cell: str = "robust-plain"
    # analytic world
    gmm_priors: Optional[List[float]] = None
    gmm_means: Optional[List[List[float]]] = None
    gmm_covariances: Optional[List[List[List[float]]]] = None
    gmm_extra_dims: int = 0
    gmm_texture_dims: int = 0
    gmm_texture_variances: Optional[List[float]] = None
    # sprite world
    dataset_path: str = "output/sprites.bin"
    dataset_size: int = 4000
    sprite_image_size: int = 16
    sprite_scale_min: float = 0.3
    sprite_scale_max: float = 0.5
    sprite_seed: int = 0
    classifier_clean_path: str = "output/classifier_clean.npz"
    classifier_noisy_path: str = "output/classifier_noisy.npz"
    denoiser_path: str = "output/denoiser.npz"
    classifier_epochs: int = 30
    classifier_batch_size: int = 64
    classifier_learning_rate: float = 1e-3
    classifier_early_stop: float = 0.99
    classifier_time_conditioning: bool = False
    denoiser_epochs: int = 200
    denoiser_batch_size: int = 128
    denoiser_learning_rate: float = 1e-3
    hidden_width: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.world not in WORLDS:
            raise ConfigError(f"world must be one of {sorted(WORLDS)}, got {self.world!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        if self.variance_kind not in VARIANCE_KINDS:
            raise ConfigError(f"variance_kind must be one of {sorted(VARIANCE_KINDS)}, got {self.variance_kind!r}")
        if self.adam_order not in ADAM_ORDERS:
            raise ConfigError(f"adam_order must be one of {sorted(ADAM_ORDERS)}, got {self.adam_order!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.scale < 0:
            raise ConfigError(f"scale must be >= 0, got {self.scale}")
        if self.num_chains < 1:
            raise ConfigError(f"num_chains must be >= 1, got {self.num_chains}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.fid_reference_count < 1:
            raise ConfigError(f"fid_reference_count must be >= 1, got {self.fid_reference_count}")
        if self.gmm_extra_dims < 0:
            raise ConfigError(f"gmm_extra_dims must be >= 0, got {self.gmm_extra_dims}")
        if self.gmm_texture_dims < 0:
            raise ConfigError(f"gmm_texture_dims must be >= 0, got {self.gmm_texture_dims}")
        if self.gmm_texture_dims and (self.gmm_texture_variances is None or len(self.gmm_texture_variances) != 4
                                      or min(self.gmm_texture_variances) <= 0):
            raise ConfigError("gmm_texture_variances needs four positive values when gmm_texture_dims > 0")
        if self.fid_dims < 0:
            raise ConfigError(f"fid_dims must be >= 0 (0 keeps every coordinate), got {self.fid_dims}")
        if not 0.0 < self.sprite_scale_min <= self.sprite_scale_max <= 0.5:
            raise ConfigError(
                f"sprite scale range must lie in (0, 0.5], got ({self.sprite_scale_min}, {self.sprite_scale_max})"
            )
        if not 0.0 < self.classifier_early_stop <= 1.0:
            raise ConfigError(f"classifier_early_stop must be in (0, 1], got {self.classifier_early_stop}")
        gmm_keys = [self.gmm_priors, self.gmm_means, self.gmm_covariances]
        if any(k is not None for k in gmm_keys) and not all(k is not None for k in gmm_keys):
            raise ConfigError("gmm_priors, gmm_means and gmm_covariances must be given together")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping of key: value pairs")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        values = {}
        for key, value in raw.items():
            values[key] = _coerce(key, value, cls.__dataclass_fields__[key].default)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                raw = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"could not parse {path}: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def resolved_output_dir(self, env: Optional[Config] = None) -> str:
        if self.output_dir:
            return self.output_dir
        env = env or Config()
        return os.path.join(env.OUTPUT_DIR, f"{self.world}_run")


# element type per list-valued key; nested GMM arrays hold numbers at any depth
LIST_ELEMENTS = {
    "checkpoints": int,
    "cells": str,
    "sweep_scales": float,
    "gmm_texture_variances": float,
    "gmm_priors": float,
    "gmm_means": float,
    "gmm_covariances": float,
}


def _check_elements(key: str, value: Any, kind: type):
    for item in value:
        if isinstance(item, list) and key.startswith("gmm_"):
            _check_elements(key, item, kind)
            continue
        if kind is str:
            ok = isinstance(item, str)
        elif kind is int:
            ok = isinstance(item, int) and not isinstance(item, bool)
        else:
            ok = isinstance(item, (int, float)) and not isinstance(item, bool)
        if not ok:
            expected = {str: "strings", int: "integers", float: "numbers"}[kind]
            raise ConfigError(f"{key} must be a list of {expected}, got element {item!r}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    # bool before int: bool is an int subclass
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    # lists and nested arrays (default_factory or None)
    if value is None:
        return value
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list, got {value!r}")
    _check_elements(key, value, LIST_ELEMENTS.get(key, float))
    return value
