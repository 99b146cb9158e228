"""Shared pytest configuration and fixtures."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from covfilt.autodiff import Tape, backward
from covfilt.config import ExperimentConfig, parse_config

if TYPE_CHECKING:
    from collections.abc import Callable

    from covfilt.autodiff import Array, Node

FD_STEP = 1e-5


def finite_difference(fn: Callable[[Array], float], x: Array, step: float = FD_STEP) -> Array:
    """Central-difference gradient of a scalar function, one entry at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus = x.copy()
        minus = x.copy()
        plus[index] += step
        minus[index] -= step
        grad[index] = (fn(plus) - fn(minus)) / (2.0 * step)
    return grad


def symmetric_finite_difference(fn: Callable[[Array], float], a: Array, step: float = FD_STEP) -> Array:
    """Directional differences along ``E_ij + E_ji`` (``E_ii`` on the diagonal).

    Compare against ``G + G^T - diag(G)`` for an analytic gradient ``G``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    out = np.zeros_like(a)
    for i in range(n):
        for j in range(i, n):
            direction = np.zeros_like(a)
            direction[i, j] = 1.0
            direction[j, i] = 1.0
            value = (fn(a + step * direction) - fn(a - step * direction)) / (2.0 * step)
            out[i, j] = out[j, i] = value
    return out


def symmetric_projection(grad: Array) -> Array:
    return grad + grad.T - np.diag(np.diag(grad))


def tape_gradient(build: Callable[[Node], Node], x: Array) -> tuple[float, Array]:
    """Value and gradient of ``build(param(x))`` via one backward pass."""
    tape = Tape()
    leaf = tape.param(x)
    root = build(leaf)
    backward(tape, root)
    return root.item(), leaf.adjoint.copy()


def tape_value(build: Callable[[Node], Node], x: Array) -> float:
    tape = Tape()
    return build(tape.const(x)).item()


def relative_error(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def random_spd(rng: np.random.Generator, n: int, floor: float = 0.5) -> Array:
    a = rng.normal(size=(n, n))
    return a @ a.T + floor * np.eye(n)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config_data() -> dict[str, object]:
    """Config mapping small enough for CLI round trips in a few seconds."""
    return {
        "seed": 7,
        "methods": ["fixed", "mle-variance", "mle-covariance", "kalman-covariance"],
        "data": {
            "n_train_tracks": 6,
            "n_test_tracks": 4,
            "track": {"duration": 6},
        },
        "model": {"hidden_sizes": [8], "dropout_rate": 0.1},
        "training": {
            "epochs": 2,
            "cov_epochs": 2,
            "kalman_epochs": 1,
            "batch_size": 16,
            "truncation": 3,
            "batch_tracks": 3,
        },
        "epistemic": {"samples": 4},
        "rainbow": {"n_points": 40, "epochs": 2},
    }


@pytest.fixture
def tiny_config(tiny_config_data: dict[str, object]) -> ExperimentConfig:
    return parse_config(tiny_config_data)


@pytest.fixture
def tiny_config_toml() -> str:
    """TOML text of the tiny config; ``out_dir`` is supplied with ``--out``."""
    return """
seed = 7
methods = ["fixed", "mle-variance", "mle-covariance", "kalman-covariance"]

[data]
n_train_tracks = 6
n_test_tracks = 4

[data.track]
duration = 6

[model]
hidden_sizes = [8]
dropout_rate = 0.1

[training]
epochs = 2
cov_epochs = 2
kalman_epochs = 1
batch_size = 16
truncation = 3
batch_tracks = 3

[epistemic]
samples = 4

[rainbow]
n_points = 40
epochs = 2
"""
