"""
Procedural sprite dataset: one patterned disc per image on a white canvas.

Four classes differ in colour and texture (solid red, blue with white
stripes, green with yellow dots, orange with a dark ring). Each disc gets a
random position, diameter and pattern rotation and is anti-aliased by
supersampling. Pixels are stored in [-1, 1] with the background at +1.
"""

import json
import struct
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np
from PIL import Image

MAGIC = b"GCSPRITE"
FORMAT_VERSION = 1
SUPERSAMPLE = 4
NUM_CLASSES = 4
CLASS_NAMES = ("solid", "striped", "dotted", "ringed")

RED = np.array([0.85, 0.10, 0.10])
BLUE = np.array([0.10, 0.25, 0.85])
GREEN = np.array([0.10, 0.60, 0.20])
YELLOW = np.array([0.95, 0.90, 0.15])
ORANGE = np.array([1.00, 0.55, 0.00])
DARK = np.array([0.20, 0.08, 0.02])
WHITE = np.ones(3)


class DatasetFormatError(ValueError):
    """Sprite dataset file could not be decoded."""


class DatasetHeaderError(DatasetFormatError):
    """Bad magic, inconsistent dimensions or trailing bytes."""


class DatasetVersionError(DatasetFormatError):
    """File written by an incompatible format version."""


class DatasetTruncatedError(DatasetFormatError):
    """File ends before the announced payload."""


@dataclass(frozen=True)
class SpriteConfig:
    image_size: int = 16
    channels: int = 3
    num_classes: int = NUM_CLASSES
    scale_min: float = 0.3
    scale_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.channels != 3:
            raise ValueError("sprites are RGB (channels = 3)")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"exactly {NUM_CLASSES} sprite classes are defined")
        if not 0.0 < self.scale_min <= self.scale_max <= 0.5:
            raise ValueError(f"scale range must lie in (0, 0.5], got ({self.scale_min}, {self.scale_max})")

    @property
    def dim(self) -> int:
        return self.image_size * self.image_size * self.channels


@dataclass(eq=False)
class SpriteDataset:
    images: np.ndarray  # (n, dim) float32 in [-1, 1]
    labels: np.ndarray  # (n,) uint8
    cfg: SpriteConfig

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def points(self) -> np.ndarray:
        return self.images.astype(np.float64)


def _pattern(label: int, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    """Colour of every supersampled point inside the disc, in rotated disc coordinates."""
    shape = u.shape + (3,)
    if label == 0:
        return np.broadcast_to(RED, shape)
    if label == 1:
        period = radius / 1.5
        stripe = np.floor(u / (period / 2.0)) % 2 == 0
        return np.where(stripe[..., None], BLUE, WHITE)
    if label == 2:
        spacing = radius * 0.8
        du = np.mod(u, spacing) - spacing / 2.0
        dv = np.mod(v, spacing) - spacing / 2.0
        dot = du**2 + dv**2 <= (0.25 * spacing) ** 2
        return np.where(dot[..., None], YELLOW, GREEN)
    rho = np.sqrt(u**2 + v**2)
    ring = (rho >= 0.5 * radius) & (rho <= 0.75 * radius)
    return np.where(ring[..., None], DARK, ORANGE)


def render_sprite(label: int, center, diameter: float, angle: float, image_size: int) -> np.ndarray:
    """One (image_size, image_size, 3) image in [0, 1]."""
    fine = image_size * SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) / SUPERSAMPLE
    xx, yy = np.meshgrid(coords, coords)
    dx, dy = xx - center[0], yy - center[1]
    radius = diameter / 2.0
    inside = dx**2 + dy**2 <= radius**2
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = dx * cos_a + dy * sin_a
    v = -dx * sin_a + dy * cos_a
    canvas = np.ones((fine, fine, 3))
    canvas[inside] = _pattern(label, u, v, radius)[inside]
    return canvas.reshape(image_size, SUPERSAMPLE, image_size, SUPERSAMPLE, 3).mean(axis=(1, 3))


def generate(cfg: SpriteConfig, n: int) -> SpriteDataset:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    labels = rng.integers(0, cfg.num_classes, size=n)
    diameters = rng.uniform(cfg.scale_min, cfg.scale_max, size=n) * size
    unit_centers = rng.uniform(0.0, 1.0, size=(n, 2))
    angles = rng.uniform(0.0, np.pi, size=n)

    images = np.empty((n, cfg.dim), dtype=np.float32)
    for i in range(n):
        radius = diameters[i] / 2.0
        # keep the disc fully inside the canvas
        center = radius + unit_centers[i] * (size - 2.0 * radius)
        img = render_sprite(int(labels[i]), center, diameters[i], angles[i], size)
        images[i] = (2.0 * img - 1.0).reshape(-1)
    return SpriteDataset(images=images, labels=labels.astype(np.uint8), cfg=cfg)


def class_reference(data: SpriteDataset, y: int, n: int, seed: int = 0) -> np.ndarray:
    """``n`` distinct images of class ``y`` drawn with a seeded generator."""
    idx = np.flatnonzero(data.labels == y)
    if idx.size < n:
        raise ValueError(f"class {y} has {idx.size} images, {n} requested")
    rng = np.random.default_rng(seed)
    return data.images[np.sort(rng.choice(idx, size=n, replace=False))].astype(np.float64)


def _cfg_bytes(cfg: SpriteConfig) -> bytes:
    return json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")


def save_dataset(path: str, data: SpriteDataset) -> None:
    cfg_blob = _cfg_bytes(data.cfg)
    n, dim = data.images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<II", n, dim))
        f.write(np.ascontiguousarray(data.images, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(data.labels, dtype=np.uint8).tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise DatasetTruncatedError(
                f"{self.path}: needs {size} bytes at offset {self.pos}, file has {len(self.blob)}"
            )
        chunk = self.blob[self.pos:self.pos + size]
        self.pos += size
        return chunk


def load_dataset(path: str) -> SpriteDataset:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise DatasetHeaderError(f"{path}: not a sprite dataset (bad magic)")
    version, cfg_len = struct.unpack("<II", reader.take(8))
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"{path}: format version {version} != {FORMAT_VERSION}")
    try:
        raw_cfg: Dict[str, Any] = json.loads(reader.take(cfg_len).decode("utf-8"))
        cfg = SpriteConfig(**raw_cfg)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as e:
        raise DatasetHeaderError(f"{path}: unreadable config echo ({e})") from e
    n, dim = struct.unpack("<II", reader.take(8))
    if dim != cfg.dim:
        raise DatasetHeaderError(f"{path}: dimension {dim} does not match config ({cfg.dim})")
    images = np.frombuffer(reader.take(n * dim * 4), dtype="<f4").astype(np.float32).reshape(n, dim)
    labels = np.frombuffer(reader.take(n), dtype=np.uint8).copy()
    if reader.pos != len(reader.blob):
        raise DatasetHeaderError(f"{path}: {len(reader.blob) - reader.pos} trailing bytes after payload")
    if labels.size and int(labels.max()) >= cfg.num_classes:
        raise DatasetHeaderError(f"{path}: label {int(labels.max())} out of range for {cfg.num_classes} classes")
    return SpriteDataset(images=images, labels=labels, cfg=cfg)


def save_sample_grid(images, cfg: SpriteConfig, path: str, columns: int = 8, upscale: int = 4) -> None:
    """Write a PNG mosaic of flattened images in [-1, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[1] != cfg.dim:
        raise ValueError(f"expected (n, {cfg.dim}) images, got {images.shape}")
    size = cfg.image_size
    n = images.shape[0]
    rows = -(-n // columns)
    mosaic = np.ones((rows * size, columns * size, 3))
    tiles = np.clip((images + 1.0) / 2.0, 0.0, 1.0).reshape(n, size, size, 3)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        mosaic[r * size:(r + 1) * size, c * size:(c + 1) * size] = tile
    img = Image.fromarray(np.round(mosaic * 255).astype(np.uint8))
    img = img.resize((img.width * upscale, img.height * upscale), Image.Resampling.NEAREST)
    img.save(path, format="PNG")


__all__ = [
    "SpriteConfig",
    "SpriteDataset",
    "DatasetFormatError",
    "DatasetHeaderError",
    "DatasetVersionError",
    "DatasetTruncatedError",
    "generate",
    "render_sprite",
    "class_reference",
    "save_dataset",
    "load_dataset",
    "save_sample_grid",
]
