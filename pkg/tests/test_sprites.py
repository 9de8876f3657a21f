import json
import struct
from dataclasses import asdict

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from PIL import Image

from src.nn import TrainConfig, noisy_accuracy, train_classifier
from src.schedule import linear_schedule
from src.sprites import (
    MAGIC,
    DatasetHeaderError,
    DatasetTruncatedError,
    DatasetVersionError,
    SpriteConfig,
    class_reference,
    generate,
    load_dataset,
    render_sprite,
    save_dataset,
    save_sample_grid,
)


@pytest.fixture(scope="module")
def small():
    return generate(SpriteConfig(seed=7), 200)


def header_offset(data):
    """Byte offset of the (n, dim) pair in a saved file."""
    return len(MAGIC) + 8 + len(json.dumps(asdict(data.cfg), sort_keys=True))


class TestSpriteConfig:
    @pytest.mark.parametrize("bad", [dict(image_size=4), dict(channels=1), dict(num_classes=5),
                                     dict(scale_min=0.0), dict(scale_max=0.6), dict(scale_min=0.4, scale_max=0.3)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            SpriteConfig(**bad)

    def test_dim(self):
        assert SpriteConfig().dim == 768
        assert SpriteConfig(image_size=8).dim == 192


class TestGenerate:
    def test_deterministic(self, small):
        again = generate(SpriteConfig(seed=7), 200)
        assert_array_equal(small.images, again.images)
        assert_array_equal(small.labels, again.labels)
        other = generate(SpriteConfig(seed=8), 200)
        assert not np.array_equal(small.images, other.images)

    def test_value_ranges(self, small):
        assert small.images.dtype == np.float32
        assert small.images.shape == (200, 768)
        assert small.images.min() >= -1.0 and small.images.max() <= 1.0
        assert set(np.unique(small.labels)) <= {0, 1, 2, 3}
        assert len(small) == 200

    def test_class_histogram_is_uniform(self):
        n = 10_000
        data = generate(SpriteConfig(image_size=8, seed=1), n)
        counts = np.bincount(data.labels, minlength=4)
        assert np.all(np.abs(counts - n / 4) <= 4 * np.sqrt(n * 0.25 * 0.75))

    def test_background_dominates(self):
        data = generate(SpriteConfig(scale_min=0.2, scale_max=0.4, seed=2), 300)
        background = np.all(data.images.reshape(300, -1, 3) == 1.0, axis=2)
        assert np.all(background.mean(axis=1) >= 0.5)

    def test_classes_differ_in_colour(self):
        centre = np.array([8.0, 8.0])
        means = [render_sprite(k, centre, 8.0, 0.3, 16)[6:10, 6:10].mean(axis=(0, 1)) for k in range(4)]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(means[i] - means[j]) > 0.1

    def test_empty_request(self):
        with pytest.raises(ValueError):
            generate(SpriteConfig(), 0)

    def test_class_reference(self, small):
        ref = class_reference(small, 2, 10, seed=1)
        assert ref.shape == (10, 768)
        assert_array_equal(ref, class_reference(small, 2, 10, seed=1))
        members = small.images[small.labels == 2]
        for row in ref:
            assert np.any(np.all(members == row, axis=1))
        with pytest.raises(ValueError):
            class_reference(small, 2, 1000)


class TestPersistence:
    def test_round_trip_is_byte_identical(self, small, tmp_path):
        first, second = tmp_path / "a.bin", tmp_path / "b.bin"
        save_dataset(str(first), small)
        loaded = load_dataset(str(first))
        save_dataset(str(second), loaded)
        assert first.read_bytes() == second.read_bytes()
        assert loaded.cfg == small.cfg
        idx = np.random.default_rng(0).choice(200, size=100, replace=False)
        assert_array_equal(loaded.labels[idx], small.labels[idx])
        assert_array_equal(loaded.images, small.images)

    def test_bad_magic(self, small, tmp_path):
        path = tmp_path / "data.bin"
        save_dataset(str(path), small)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetHeaderError):
            load_dataset(str(path))

    def test_version_mismatch(self, small, tmp_path):
        path = tmp_path / "data.bin"
        save_dataset(str(path), small)
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetVersionError):
            load_dataset(str(path))

    def test_truncated(self, small, tmp_path):
        path = tmp_path / "data.bin"
        save_dataset(str(path), small)
        path.write_bytes(path.read_bytes()[:-50])
        with pytest.raises(DatasetTruncatedError):
            load_dataset(str(path))

    def test_corrupted_count(self, small, tmp_path):
        path = tmp_path / "data.bin"
        save_dataset(str(path), small)
        offset = header_offset(small)
        blob = bytearray(path.read_bytes())
        assert struct.unpack("<II", blob[offset:offset + 8]) == (200, 768)
        blob[offset:offset + 4] = struct.pack("<I", 201)
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetTruncatedError):
            load_dataset(str(path))
        blob[offset:offset + 4] = struct.pack("<I", 199)
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetHeaderError):
            load_dataset(str(path))

    def test_out_of_range_label(self, small, tmp_path):
        path = tmp_path / "data.bin"
        save_dataset(str(path), small)
        blob = bytearray(path.read_bytes())
        # labels are the last n bytes
        blob[-1] = 4
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetHeaderError, match="label 4"):
            load_dataset(str(path))

    def test_sample_grid(self, small, tmp_path):
        path = tmp_path / "grid.png"
        save_sample_grid(small.images[:10], small.cfg, str(path), columns=4, upscale=2)
        with Image.open(path) as img:
            assert img.size == (4 * 16 * 2, 3 * 16 * 2)
        with pytest.raises(ValueError):
            save_sample_grid(np.zeros((2, 5)), small.cfg, str(path))


@pytest.mark.slow
class TestSeparability:
    def test_clean_classifier_separates_classes(self):
        data = generate(SpriteConfig(seed=0), 4000)
        cfg = TrainConfig(epochs=30, learning_rate=1e-3, hidden_dims=(128, 64), early_stop_accuracy=0.99)
        net = train_classifier((data.points(), data.labels), cfg, linear_schedule(200, 5e-4, 0.1))
        assert max(h["val_accuracy"] for h in net.history) >= 0.95

    def test_noise_trained_classifier_beats_clean_one_on_noised_sprites(self):
        sched = linear_schedule(200, 5e-4, 0.1)
        data = generate(SpriteConfig(seed=0), 4000)
        held_out = generate(SpriteConfig(seed=1), 1000)
        base = dict(epochs=30, learning_rate=1e-3, hidden_dims=(128, 64))
        clean = train_classifier((data.points(), data.labels), TrainConfig(early_stop_accuracy=0.99, **base), sched)
        noisy = train_classifier(
            (data.points(), data.labels),
            TrainConfig(noisy_training=True, time_conditioning=True, early_stop_accuracy=1.0, **base),
            sched,
        )
        clean_acc = noisy_accuracy(clean, held_out.points(), held_out.labels, sched, seed=3)
        noisy_acc = noisy_accuracy(noisy, held_out.points(), held_out.labels, sched, seed=3)
        assert clean_acc <= 0.55, f"clean classifier on noised sprites: {clean_acc:.3f}"
        assert noisy_acc - clean_acc >= 0.15, f"noisy {noisy_acc:.3f} vs clean {clean_acc:.3f}"
