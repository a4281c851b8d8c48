"""Closed-form velocity distribution at a space-time anchor under independent coupling.

For Gaussian-mixture source and target with ``gamma = rho0 * rho1``, every
pair of components (i, j) is a linear-Gaussian model for
``(V, X_t) = (X1 - X0, (1-t) X0 + t X1)``. Conditioning on ``X_t = x`` gives
a Gaussian in ``v`` per pair; the pair weights become posterior weights
proportional to ``w_i w_j N(x; m_t, S)``. With per-axis variances ``s0^2``,
``s1^2`` and ``S = (1-t)^2 s0^2 + t^2 s1^2``::

    E[V | x]   = (mu1 - mu0) + (t s1^2 - (1-t) s0^2) / S * (x - m_t)
    Var[V | x] = s0^2 s1^2 / S
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .coupling import minibatch_couple
from .dists import GaussianMixture, StandardGaussian, sample
from .interp import SpaceTimePoint, interp_state

__all__ = [
    "UndefinedVelocityLaw",
    "VelocityLaw",
    "as_mixture",
    "rho_t",
    "log_rho_t",
    "joint_density",
    "velocity_law",
    "independent_sampler",
    "ot_coupled_sampler",
    "empirical_velocity_law",
    "UNDERFLOW",
]

UNDERFLOW = 1e-300


class UndefinedVelocityLaw(ValueError):
    """The anchor has (numerically) zero interpolant density."""


def as_mixture(spec) -> GaussianMixture:
    if isinstance(spec, GaussianMixture):
        return spec
    if isinstance(spec, StandardGaussian):
        return GaussianMixture([1.0], np.zeros((1, spec.dim)), [1.0])
    raise TypeError(f"closed-form oracle needs Gaussian mixtures, got {type(spec).__name__}")


def _pair_params(source, target, t):
    p0, p1 = as_mixture(source), as_mixture(target)
    if p0.dim != p1.dim:
        raise ValueError("source and target dimensions differ")
    w = (p0.weights[:, None] * p1.weights[None, :]).reshape(-1)
    mu0 = np.repeat(p0.means, p1.n_components, axis=0)
    mu1 = np.tile(p1.means, (p0.n_components, 1))
    s0 = np.repeat(p0.stdevs, p1.n_components)
    s1 = np.tile(p1.stdevs, p0.n_components)
    m_t = (1 - t) * mu0 + t * mu1
    S = (1 - t) ** 2 * s0**2 + t**2 * s1**2
    return w, mu0, mu1, s0, s1, m_t, S


def _log_pair_terms(source, target, x, t):
    w, mu0, mu1, s0, s1, m_t, S = _pair_params(source, target, t)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = m_t.shape[1]
    x = x.reshape(-1, d)
    d2 = np.sum((x[:, None, :] - m_t[None]) ** 2, axis=2)
    log_terms = np.log(w)[None] - 0.5 * d2 / S[None] - 0.5 * d * np.log(2 * math.pi * S)[None]
    return log_terms


def log_rho_t(source, target, x_t, t: float) -> np.ndarray:
    return logsumexp(_log_pair_terms(source, target, x_t, t), axis=1)


def rho_t(source, target, x_t, t: float):
    """Density of ``(1-t) X0 + t X1`` for independent mixture endpoints.

    Returns a float for a single point, else one value per row.
    """
    x = np.asarray(x_t, dtype=float)
    out = np.exp(log_rho_t(source, target, x, t))
    d = as_mixture(source).dim
    return float(out[0]) if x.size == d else out


def joint_density(source, target, x0, x1):
    """Independent coupling density ``rho0(x0) rho1(x1)``."""
    p0, p1 = as_mixture(source), as_mixture(target)
    return np.exp(p0.log_density(x0) + p1.log_density(x1))


@dataclass(frozen=True)
class VelocityLaw:
    """Gaussian mixture over velocities at a fixed anchor."""

    anchor: SpaceTimePoint
    mixture: GaussianMixture

    @property
    def weights(self):
        return self.mixture.weights

    @property
    def means(self):
        return self.mixture.means

    @property
    def stdevs(self):
        return self.mixture.stdevs

    def density(self, v) -> np.ndarray:
        return np.exp(self.mixture.log_density(v))

    def sample(self, n: int, seed) -> np.ndarray:
        return sample(self.mixture, n, seed)

    def mean(self) -> np.ndarray:
        return self.mixture.moments()[0]


def velocity_law(source, target, anchor: SpaceTimePoint) -> VelocityLaw:
    """Conditional law of ``X1 - X0`` given ``X_t = anchor.x_t``."""
    t = float(anchor.t)
    x = anchor.x_t
    w, mu0, mu1, s0, s1, m_t, S = _pair_params(source, target, t)
    log_terms = _log_pair_terms(source, target, x, t)[0]
    log_rho = logsumexp(log_terms)
    if not log_rho > math.log(UNDERFLOW):
        raise UndefinedVelocityLaw(
            f"rho_t(x_t) = exp({log_rho:.4g}) is below {UNDERFLOW:g} at x_t={x.tolist()}, t={t}"
        )
    post = np.exp(log_terms - log_rho)
    post = post / post.sum()
    gain = (t * s1**2 - (1 - t) * s0**2) / S
    means = (mu1 - mu0) + gain[:, None] * (x[None, :] - m_t)
    stdevs = s0 * s1 / np.sqrt(S)
    return VelocityLaw(anchor=anchor, mixture=GaussianMixture(post, means, stdevs))


PairSampler = Callable[[int, np.random.Generator], "tuple[np.ndarray, np.ndarray]"]


def independent_sampler(source, target) -> PairSampler:
    def draw(m, rng):
        return source.draw(m, rng), target.draw(m, rng)

    return draw


def ot_coupled_sampler(source, target, ot_batch: int) -> PairSampler:
    """Pairs from mini-batch OT couplings of ``ot_batch``-sized draws."""

    def draw(m, rng):
        m = -(-m // ot_batch) * ot_batch
        return minibatch_couple(source.draw(m, rng), target.draw(m, rng), ot_batch)

    return draw


def empirical_velocity_law(gamma_sampler: PairSampler, anchor: SpaceTimePoint, window: float,
                           n: int, seed: int = 0, chunk: int = 100_000,
                           max_draws: int = 50_000_000) -> np.ndarray:
    """Velocities ``x1 - x0`` of pairs whose interpolant at ``anchor.t`` lands within ``window``.

    Stops after ``n`` accepted rows or ``max_draws`` proposals; raises if
    fewer than 100 rows were accepted.
    """
    from .dists import make_rng

    if window <= 0:
        raise ValueError("window must be positive")
    kept, total, drawn = [], 0, 0
    k = 0
    while total < n and drawn < max_draws:
        rng = make_rng(seed, 21, k)
        x0, x1 = gamma_sampler(chunk, rng)
        drawn += len(x0)
        k += 1
        xt = interp_state(x0, x1, anchor.t)
        hit = np.linalg.norm(xt - anchor.x_t[None, :], axis=1) <= window
        if hit.any():
            kept.append((x1 - x0)[hit])
            total += int(hit.sum())
    if total < 100:
        raise RuntimeError(f"only {total} of {drawn} proposals fell inside the window")
    return np.concatenate(kept)[:n]
