"""Toy densities and the logit preprocessing transform."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

RING_RADIUS = 4.0
RING_STD = 0.5
LINE1D_CENTERS = (-2.0, 2.0)
LINE1D_STD = 0.5


@dataclass
class ToyDataset:
    name: str
    samples: np.ndarray
    seed: int

    @property
    def d(self):
        return self.samples.shape[1]


def _ring8(rng, n):
    k = rng.integers(0, 8, size=n)
    angle = 2 * math.pi * k / 8
    centers = RING_RADIUS * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + RING_STD * rng.standard_normal((n, 2))


def _checkerboard(rng, n):
    x1 = rng.uniform(-2, 2, size=n)
    x2 = rng.uniform(0, 1, size=n) - rng.integers(0, 2, size=n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return np.stack([x1, x2], axis=1) * 2.0


def _two_moons(rng, n):
    upper = rng.random(n) < 0.5
    theta = rng.uniform(0, math.pi, size=n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + 0.1 * rng.standard_normal((n, 2))
    return (pts - [0.5, 0.25]) * 2.0


def _spiral(rng, n):
    r = np.sqrt(rng.random(n)) * 3 * math.pi
    arm = rng.random(n) < 0.5
    sign = np.where(arm, 1.0, -1.0)
    pts = np.stack([-np.cos(r) * r, np.sin(r) * r], axis=1) * sign[:, None]
    return (pts + 0.5 * rng.standard_normal((n, 2))) / 2.0


def _line1d(rng, n):
    k = rng.integers(0, 2, size=n)
    centers = np.asarray(LINE1D_CENTERS)[k]
    return (centers + LINE1D_STD * rng.standard_normal(n))[:, None]


GENERATORS = {
    "ring8": _ring8,
    "checkerboard": _checkerboard,
    "two_moons": _two_moons,
    "spiral": _spiral,
    "line1d": _line1d,
}


def generate_dataset(name, n, seed=0):
    if name not in GENERATORS:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}")
    if n < 1:
        raise ConfigurationError("dataset size must be at least 1")
    rng = np.random.default_rng(seed)
    return ToyDataset(name, np.ascontiguousarray(GENERATORS[name](rng, n), dtype=np.float64), seed)


def logit_preprocess(x, alpha=0.05):
    """``y = logit(alpha + (1 - 2 alpha) x)`` and the per-row log|dy/dx|."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 < alpha < 0.5:
        raise DomainError("alpha must lie in (0, 0.5)")
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("logit preprocessing needs inputs in [0, 1]")
    s = alpha + (1 - 2 * alpha) * x
    y = np.log(s) - np.log1p(-s)
    logdet = np.log(1 - 2 * alpha) - np.log(s) - np.log1p(-s)
    return y, logdet.reshape(x.shape[0], -1).sum(axis=1)


def inverse_logit(y, alpha=0.05):
    y = np.asarray(y, dtype=np.float64)
    if not 0 < alpha < 0.5:
        raise DomainError("alpha must lie in (0, 0.5)")
    s = 0.5 * (1.0 + np.tanh(0.5 * y))
    return (s - alpha) / (1 - 2 * alpha)
