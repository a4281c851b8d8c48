"""Linear interpolation paths and their ground-truth velocity/acceleration targets.

All functions broadcast over rows: pass (B, d) arrays and scalar or (B,) times.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SpaceTimePoint",
    "VelTimePoint",
    "interp_state",
    "gt_velocity",
    "interp_velocity",
    "gt_acceleration",
]


@dataclass(frozen=True)
class SpaceTimePoint:
    x_t: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "x_t", np.atleast_1d(np.asarray(self.x_t, dtype=float)))
        _check_time(self.t, "t")

    @property
    def dim(self) -> int:
        return self.x_t.shape[0]


@dataclass(frozen=True)
class VelTimePoint:
    v_tau: np.ndarray
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "v_tau", np.atleast_1d(np.asarray(self.v_tau, dtype=float)))
        _check_time(self.tau, "tau")


def _check_time(t, name):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"{name} must lie in [0, 1]")


def _pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _time_col(t, like: np.ndarray):
    t = np.asarray(t, dtype=float)
    if t.ndim == 1 and like.ndim == 2:
        t = t[:, None]
    return t


def interp_state(x0, x1, t):
    """(1 - t) x0 + t x1."""
    x0, x1 = _pair(x0, x1)
    _check_time(t, "t")
    t = _time_col(t, x0)
    return (1.0 - t) * x0 + t * x1


def gt_velocity(x0, x1):
    x0, x1 = _pair(x0, x1)
    return x1 - x0


def interp_velocity(v0, v1, tau):
    """(1 - tau) v0 + tau v1; the velocity-space analogue of :func:`interp_state`."""
    v0, v1 = _pair(v0, v1)
    _check_time(tau, "tau")
    tau = _time_col(tau, v0)
    return (1.0 - tau) * v0 + tau * v1


def gt_acceleration(x0, x1, v0):
    x0, x1 = _pair(x0, x1)
    _, v0 = _pair(x0, v0)
    return x1 - x0 - v0
