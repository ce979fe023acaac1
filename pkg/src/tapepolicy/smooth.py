"""Globally smooth surrogates for max/min/relu/step and the squared-relu penalty.

All functions accept floats or recorded tape values. No epsilon guards or
clamps are applied: the closed forms are smooth everywhere for ``k > 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tape import sqrt

DEFAULT_SHARPNESS = 50.0


def _check_k(k):
    if not k > 0:
        raise ValueError(f"sharpness must be positive, got {k}")


def smooth_max(a, b, k=DEFAULT_SHARPNESS):
    _check_k(k)
    d = a - b
    return 0.5 * (a + b + sqrt(d * d + 1.0 / k))


def smooth_min(a, b, k=DEFAULT_SHARPNESS):
    return -smooth_max(-a, -b, k)


def smooth_relu(x, k=DEFAULT_SHARPNESS):
    return smooth_max(x, 0.0, k)


def rational_sigmoid(x, k=DEFAULT_SHARPNESS):
    _check_k(k)
    kx = k * x
    return 0.5 * (1.0 + kx / sqrt(1.0 + kx * kx))


def max_gap(k=DEFAULT_SHARPNESS) -> float:
    """Largest distance between smooth_max and max (attained at a == b)."""
    _check_k(k)
    return (1.0 / k) ** 0.5 / 2.0


def transition_width(k=DEFAULT_SHARPNESS) -> float:
    """Rough width of the region where the surrogates bend; informational."""
    _check_k(k)
    return 2.0 / k


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 1.0
    k: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        _check_k(self.k)


def violation_penalty(violation, cfg: PenaltyConfig = PenaltyConfig()):
    s = smooth_relu(violation, cfg.k)
    return cfg.lam * (s * s)
