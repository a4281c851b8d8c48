"""Synthetic source/target distributions and the shared random stream helper."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "make_rng",
    "StandardGaussian",
    "GaussianMixture",
    "MoonDataset",
    "DistributionSpec",
    "sample",
    "density",
    "log_density",
    "preset",
    "PRESETS",
    "velocity_source",
    "spec_from_dict",
    "spec_to_dict",
    "load_spec",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``.

    Distinct stream tuples give statistically independent generators, so
    callers never share state: e.g. ``make_rng(seed, iteration, purpose)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(int(seed))


@dataclass(frozen=True)
class StandardGaussian:
    dim: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = _rows(x, self.dim)
        return -0.5 * np.sum(x * x, axis=1) - 0.5 * self.dim * math.log(2 * math.pi)

    def moments(self):
        return np.zeros(self.dim), np.eye(self.dim)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of isotropic Gaussians.

    ``weights`` has shape (K,), ``means`` (K, dim) and ``stdevs`` (K,), one
    per-axis standard deviation per component.
    """

    weights: np.ndarray
    means: np.ndarray
    stdevs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        s = np.asarray(self.stdevs, dtype=float).reshape(-1)
        if not (len(w) == len(m) == len(s)) or len(w) == 0:
            raise ValueError("weights, means and stdevs must have the same nonzero length")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError(f"weights must be a probability vector, got sum {w.sum()!r}")
        if np.any(s <= 0):
            raise ValueError("all stdevs must be positive")
        for name, arr in (("weights", w), ("means", m), ("stdevs", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[k] + self.stdevs[k, None] * eps

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """(n, K) array of log N(x; mean_k, stdev_k^2 I)."""
        x = _rows(x, self.dim)
        d2 = np.sum((x[:, None, :] - self.means[None]) ** 2, axis=2)
        var = self.stdevs**2
        return -0.5 * d2 / var - 0.5 * self.dim * np.log(2 * math.pi * var)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_densities(x) + np.log(self.weights), axis=1)

    def moments(self):
        mean = self.weights @ self.means
        second = sum(
            w * (s * s * np.eye(self.dim) + np.outer(m, m))
            for w, m, s in zip(self.weights, self.means, self.stdevs)
        )
        return mean, second - np.outer(mean, mean)


@dataclass(frozen=True)
class MoonDataset:
    """Two interleaved half-circle arcs of equal radius.

    Noise is isotropic Gaussian truncated at 4 standard deviations so every
    point stays within ``4 * noise_stdev`` of its arc.
    """

    noise_stdev: float = 0.05
    radius: float = 1.5
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.noise_stdev < 0 or self.radius <= 0:
            raise ValueError("need noise_stdev >= 0 and radius > 0")
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        if len(self.offset) != 2:
            raise ValueError("offset must be a 2-vector")

    dim = 2

    def arc_centers(self) -> np.ndarray:
        r = self.radius
        return np.asarray(self.offset) + r * np.array([[-0.5, -0.25], [0.5, 0.25]])

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        which = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, math.pi, size=n)
        # upper arc for the first moon, lower arc for the second
        sign = np.where(which == 0, 1.0, -1.0)
        pts = self.arc_centers()[which] + self.radius * np.stack(
            [sign * np.cos(theta), sign * np.sin(theta)], axis=1
        )
        noise = rng.standard_normal((n, 2))
        bad = np.linalg.norm(noise, axis=1) > 4.0
        while np.any(bad):
            noise[bad] = rng.standard_normal((int(bad.sum()), 2))
            bad = np.linalg.norm(noise, axis=1) > 4.0
        return pts + self.noise_stdev * noise

    def distance_to_arcs(self, x: np.ndarray) -> np.ndarray:
        """Distance of each row to the nearer of the two arcs."""
        x = _rows(x, 2)
        out = []
        for k, sign in ((0, 1.0), (1, -1.0)):
            rel = x - self.arc_centers()[k]
            ang = np.arctan2(sign * rel[:, 1], sign * rel[:, 0])
            ang = np.where(ang >= 0, ang, np.where(ang > -math.pi / 2, 0.0, math.pi))
            nearest = self.arc_centers()[k] + self.radius * np.stack(
                [sign * np.cos(ang), sign * np.sin(ang)], axis=1
            )
            out.append(np.linalg.norm(x - nearest, axis=1))
        return np.minimum(*out)


DistributionSpec = Union[StandardGaussian, GaussianMixture, MoonDataset]


def _rows(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.shape[1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape[1]}")
    return x


def sample(spec: DistributionSpec, n: int, seed) -> np.ndarray:
    """Draw ``n`` rows from ``spec``; ``seed`` is an int or a Generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return spec.draw(int(n), _as_rng(seed))


def log_density(spec: DistributionSpec, x) -> np.ndarray:
    if isinstance(spec, MoonDataset):
        raise TypeError("MoonDataset has no closed-form density")
    return spec.log_density(x)


def density(spec: DistributionSpec, x) -> np.ndarray | float:
    """Exact density at ``x``; a float for a single point, else one value per row."""
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 0 or (x_arr.ndim == 1 and spec.dim > 1)
    out = np.exp(log_density(spec, x_arr))
    return float(out[0]) if single else out


def _ring(n: int, radius: float, stdev: float) -> GaussianMixture:
    ang = 2 * math.pi * np.arange(n) / n
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture(np.full(n, 1.0 / n), means, np.full(n, stdev))


def _line(means, stdev: float) -> GaussianMixture:
    k = len(means)
    return GaussianMixture(np.full(k, 1.0 / k), np.asarray(means, float)[:, None], np.full(k, stdev))


PRESETS = ("1d-2n", "1d-5n", "2d-6n", "8n-moons")


def preset(name: str) -> tuple[DistributionSpec, DistributionSpec]:
    """(source, target) pair for one of the synthetic benchmarks."""
    if name == "1d-2n":
        return StandardGaussian(1), _line([-1.0, 1.0], 0.3)
    if name == "1d-5n":
        return StandardGaussian(1), _line([-2.0, -1.0, 0.0, 1.0, 2.0], 0.2)
    if name == "2d-6n":
        return StandardGaussian(2), _ring(6, 3.0, 0.3)
    if name == "8n-moons":
        return _ring(8, 3.0, 0.1), MoonDataset(noise_stdev=0.05, radius=1.5)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def velocity_source(dim: int) -> StandardGaussian:
    return StandardGaussian(dim)


def spec_from_dict(doc: dict) -> DistributionSpec:
    kind = doc.get("type")
    if kind == "standard_gaussian":
        return StandardGaussian(int(doc.get("dim", 1)))
    if kind == "gaussian_mixture":
        return GaussianMixture(doc["weights"], doc["means"], doc["stdevs"])
    if kind == "moons":
        return MoonDataset(
            noise_stdev=float(doc.get("noise_stdev", 0.05)),
            radius=float(doc.get("radius", 1.5)),
            offset=tuple(doc.get("offset", (0.0, 0.0))),
        )
    raise ValueError(f"unknown distribution type {kind!r}")


def spec_to_dict(spec: DistributionSpec) -> dict:
    if isinstance(spec, StandardGaussian):
        return {"type": "standard_gaussian", "dim": spec.dim}
    if isinstance(spec, GaussianMixture):
        return {
            "type": "gaussian_mixture",
            "weights": spec.weights.tolist(),
            "means": spec.means.tolist(),
            "stdevs": spec.stdevs.tolist(),
        }
    return {
        "type": "moons",
        "noise_stdev": spec.noise_stdev,
        "radius": spec.radius,
        "offset": list(spec.offset),
    }


def load_spec(path: str | Path) -> DistributionSpec:
    return spec_from_dict(json.loads(Path(path).read_text()))
