import os

import numpy as np
import pytest

os.environ.setdefault("GRADCHECK_PROGRESS", "0")

from src.gmm_world import default_world  # noqa: E402
from src.schedule import linear_schedule  # noqa: E402


@pytest.fixture
def sched():
    return linear_schedule(200, 5e-4, 0.1)


@pytest.fixture
def short_sched():
    return linear_schedule(20, 0.005, 0.5)


@pytest.fixture
def world():
    return default_world()


@pytest.fixture
def world3():
    return default_world(extra_dims=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, h=1e-5):
    """Gradient of a scalar function of one (d,) point by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def assert_close_vectors(actual, expected, rel=1e-4, abs_tol=1e-7):
    actual, expected = np.asarray(actual), np.asarray(expected)
    err = np.linalg.norm(actual - expected)
    assert err <= rel * np.linalg.norm(expected) + abs_tol, f"error {err} vs norm {np.linalg.norm(expected)}"
