"""Fixed-step Euler samplers for rectified flow and the coupled HRF2 ODEs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dists import DistributionSpec, make_rng, sample
from .interp import SpaceTimePoint
from .model import NonFiniteError

__all__ = [
    "NfeBudget",
    "NfeCounter",
    "Trajectory",
    "integrate_velocity",
    "sample_hrf2",
    "sample_rf",
    "marginal_snapshot",
]

# stream ids for make_rng(seed, stream, step)
_U0_STREAM = 11
_Z0_STREAM = 12


@dataclass(frozen=True)
class NfeBudget:
    n_t: int
    n_tau: int = 1

    def __post_init__(self):
        if self.n_t < 1 or self.n_tau < 1:
            raise ValueError("step counts must be >= 1")

    @property
    def total(self) -> int:
        return self.n_t * self.n_tau


@dataclass
class NfeCounter:
    """Counts model evaluations: ``calls`` batched calls, ``rows`` row evaluations."""

    calls: int = 0
    rows: int = 0

    def add(self, n_rows: int):
        self.calls += 1
        self.rows += n_rows


@dataclass
class Trajectory:
    """Outer-loop states of a batch: ``states[k]`` is the batch at ``times[k]``."""

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray | None = None

    def rows(self):
        """Yield ``(sample_id, step, t, *coords)`` tuples."""
        for k, t in enumerate(self.times):
            for i, z in enumerate(self.states[k]):
                yield (i, k, float(t), *map(float, z))


def _check(state, what, step):
    if not np.all(np.isfinite(state)):
        raise NonFiniteError(f"non-finite {what} at step {step}")


def _anchor_arrays(anchor, n, d):
    if isinstance(anchor, SpaceTimePoint):
        return np.broadcast_to(anchor.x_t, (n, d)), anchor.t
    x, t = anchor
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = np.broadcast_to(x, (n, d))
    return x, t


def integrate_velocity(model, anchor, v0, n_tau: int, counter: NfeCounter | None = None) -> np.ndarray:
    """Euler-integrate ``du = a(x_t, t, u, tau) dtau`` from ``tau=0`` to ``1``.

    ``anchor`` is a :class:`SpaceTimePoint` shared by all rows of ``v0`` or a
    pair ``(x_t, t)`` of per-row arrays. Uses exactly ``n_tau`` model calls.
    """
    if n_tau < 1:
        raise ValueError("n_tau must be >= 1")
    u = np.array(v0, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    n, d = u.shape
    x, t = _anchor_arrays(anchor, n, d)
    h = 1.0 / n_tau
    field = model.bind(x, t) if hasattr(model, "bind") else (lambda v, tau: model(x, t, v, tau))
    for k in range(n_tau):
        a = field(u, k * h)
        if counter is not None:
            counter.add(n)
        u = u + h * np.asarray(a, dtype=float)
        _check(u, "velocity state", k)
    return u


def sample_hrf2(model, z0, budget: NfeBudget, seed: int = 0, *, record: bool = False,
                stop_step: int | None = None, velocity_source=None,
                counter: NfeCounter | None = None):
    """Generate with the coupled ODEs: an inner velocity solve per outer location step.

    A fresh ``u0 ~ pi0`` is drawn at every outer step ``k`` from stream
    ``(seed, k)``. Returns ``(z1, trajectory)``; the trajectory is ``None``
    unless ``record`` is set.
    """
    z = np.array(z0, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, d = z.shape
    n_t = budget.n_t
    steps = n_t if stop_step is None else stop_step
    times, states, vels = [0.0], [z.copy()], []
    h = 1.0 / n_t
    for k in range(steps):
        rng = make_rng(seed, _U0_STREAM, k)
        u0 = rng.standard_normal((n, d)) if velocity_source is None else velocity_source.draw(n, rng)
        t_k = k * h
        u1 = integrate_velocity(model, (z, t_k), u0, budget.n_tau, counter)
        z = z + h * u1
        _check(z, "location state", k)
        if record:
            times.append((k + 1) * h)
            states.append(z.copy())
            vels.append(u1)
    traj = None
    if record:
        traj = Trajectory(np.array(times), np.stack(states), np.stack(vels) if vels else None)
    return z, traj


def sample_rf(model, z0, n_t: int, seed: int = 0, *, record: bool = False,
              counter: NfeCounter | None = None):
    """Plain Euler on ``dz = v(z, t) dt``; ``seed`` is unused (the ODE is deterministic)."""
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    z = np.array(z0, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    h = 1.0 / n_t
    times, states = [0.0], [z.copy()]
    for k in range(n_t):
        v = model(z, k * h)
        if counter is not None:
            counter.add(z.shape[0])
        z = z + h * np.asarray(v, dtype=float)
        _check(z, "location state", k)
        if record:
            times.append((k + 1) * h)
            states.append(z.copy())
    traj = Trajectory(np.array(times), np.stack(states)) if record else None
    return z, traj


def marginal_snapshot(model, budget: NfeBudget, t_stop: float, n: int, seed: int,
                      source: DistributionSpec) -> np.ndarray:
    """States of ``n`` generated particles at the outer step nearest ``t_stop``."""
    if not 0.0 <= t_stop <= 1.0:
        raise ValueError("t_stop must lie in [0, 1]")
    z0 = sample(source, n, make_rng(seed, _Z0_STREAM))
    k = int(round(t_stop * budget.n_t))
    z, _ = sample_hrf2(model, z0, budget, seed, stop_step=k)
    return z
