"""Exact mini-batch optimal transport and the data / velocity couplings built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .dists import make_rng
from .interp import SpaceTimePoint

__all__ = [
    "CouplingPlan",
    "VelocityPairBatch",
    "MAX_OT_BATCH",
    "solve_ot",
    "couple_data",
    "minibatch_couple",
    "couple_velocity",
    "velocity_pairs",
]

MAX_OT_BATCH = 4096


@dataclass(frozen=True)
class CouplingPlan:
    """Row ``i`` of the first batch is paired with row ``sigma[i]`` of the second."""

    sigma: np.ndarray
    cost: float

    @property
    def batch_size(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True)
class VelocityPairBatch:
    anchor: SpaceTimePoint
    v0: np.ndarray
    v1: np.ndarray
    plan: CouplingPlan


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("batches must be 1-D or 2-D arrays")
    return a


def _potentials(C: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Reduced costs ``C - u - v`` for an optimal assignment (>= 0, zero on it).

    Dual potentials come from shortest paths on the exchange graph where edge
    ``i -> k`` costs ``C[i, sigma[k]] - C[k, sigma[k]]``; optimality of
    ``sigma`` rules out negative cycles.
    """
    B = len(sigma)
    matched = C[np.arange(B), sigma]
    W = C[:, sigma] - matched[None, :]
    dist = np.zeros(B)
    active = np.arange(B)
    for _ in range(B):
        # relax only from rows whose distance moved last round
        new = np.minimum(dist, (dist[active, None] + W[active]).min(axis=0))
        active = np.flatnonzero(new < dist)
        dist = new
        if active.size == 0:
            break
    # u_i = -dist_i, v_sigma(k) = C[k, sigma(k)] + dist_k
    v = np.empty(B)
    v[sigma] = matched + dist
    return C + dist[:, None] - v[None, :]


def _has_alternative(E: np.ndarray, sigma: np.ndarray) -> bool:
    """Whether the tight edges admit a second perfect matching.

    That happens exactly when the exchange graph restricted to tight edges
    (``i -> k`` when row ``i`` can take ``sigma[k]``) has a directed cycle.
    """
    X = E[:, sigma]
    np.fill_diagonal(X, False)
    if not X.any():
        return False
    n, _ = connected_components(csr_matrix(X), directed=True, connection="strong")
    return n < len(sigma)


def _lexicographic_min(E: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Smallest (lexicographic) perfect matching inside the equality graph ``E``.

    ``sigma`` must be a perfect matching in ``E``. Rows are fixed in order;
    each row takes its lowest column for which the remaining unfixed rows can
    still be matched, found by an alternating-path search.
    """
    B = len(sigma)
    col_of = sigma.copy()
    row_of = np.empty(B, dtype=int)
    row_of[col_of] = np.arange(B)
    locked = np.zeros(B, dtype=bool)  # by column
    nbrs = [np.flatnonzero(E[i]) for i in range(B)]

    def augment(start_row, target_col, banned_row):
        # DFS for an alternating path start_row -> ... -> target_col over unlocked columns
        seen = np.zeros(B, dtype=bool)
        stack = [(start_row, iter(nbrs[start_row]))]
        path = []
        while stack:
            r, it = stack[-1]
            advanced = False
            for c in it:
                if locked[c] or seen[c]:
                    continue
                seen[c] = True
                if c == target_col:
                    path.append((r, c))
                    return path
                nxt = row_of[c]
                if nxt == banned_row:
                    continue
                path.append((r, c))
                stack.append((nxt, iter(nbrs[nxt])))
                advanced = True
                break
            if not advanced:
                stack.pop()
                if path:
                    path.pop()
        return None

    for i in range(B):
        for j in nbrs[i]:
            if j == col_of[i]:
                break
            if locked[j]:
                continue
            k = row_of[j]
            freed = col_of[i]
            locked[j] = True  # j goes to i; keep the search off it
            path = augment(k, freed, i)
            locked[j] = False
            if path is not None:
                col_of[i], row_of[j] = j, i
                for r, c in path:
                    col_of[r], row_of[c] = c, r
                break
        locked[col_of[i]] = True
    return col_of


def _distinct(x: np.ndarray) -> bool:
    s = np.sort(x)
    return bool(np.all(s[1:] > s[:-1]))


def solve_ot(a, b) -> CouplingPlan:
    """Exact squared-Euclidean assignment between two equal-size batches.

    Among optimal assignments the lexicographically smallest ``sigma`` is
    returned, so duplicate points give reproducible plans.
    """
    a, b = _as_batch(a), _as_batch(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    B = a.shape[0]
    if B < 1:
        raise ValueError("empty batch")
    if B > MAX_OT_BATCH:
        raise ValueError(f"batch size {B} exceeds the exact-solver bound {MAX_OT_BATCH}")
    if a.shape[1] == 1 and _distinct(a[:, 0]) and _distinct(b[:, 0]):
        # strictly convex cost on distinct points: the monotone matching is the unique optimum
        sigma = np.empty(B, dtype=int)
        sigma[np.argsort(a[:, 0], kind="stable")] = np.argsort(b[:, 0], kind="stable")
        cost = float(np.sum(np.sum((a - b[sigma]) ** 2, axis=1)))
        return CouplingPlan(sigma=sigma, cost=cost)
    C = cdist(a, b, "sqeuclidean")
    _, sigma = linear_sum_assignment(C)
    if B > 1:
        R = _potentials(C, sigma)
        # potentials accumulate rounding along paths of up to B edges
        tol = 16 * B * np.finfo(float).eps * max(1.0, float(C.max()))
        E = R <= tol
        if _has_alternative(E, sigma):
            sigma = _lexicographic_min(E, sigma)
    cost = float(np.sum(np.sum((a - b[sigma]) ** 2, axis=1)))
    return CouplingPlan(sigma=np.asarray(sigma, dtype=int), cost=cost)


def couple_data(x0, x1) -> tuple[np.ndarray, np.ndarray]:
    """OT pairs ``(x0[i], x1[sigma[i]])`` as two row-aligned arrays."""
    plan = solve_ot(x0, x1)
    return _as_batch(x0), _as_batch(x1)[plan.sigma]


def minibatch_couple(x0, x1, ot_batch: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Couple consecutive ``ot_batch``-row chunks independently.

    ``ot_batch=None`` (or 1) keeps the independent pairing untouched.
    """
    x0, x1 = _as_batch(x0), _as_batch(x1)
    n = x0.shape[0]
    if ot_batch is None or ot_batch <= 1:
        return x0, x1
    if n % ot_batch:
        raise ValueError(f"batch of {n} rows is not a multiple of ot_batch={ot_batch}")
    out = np.empty_like(x1)
    for s in range(0, n, ot_batch):
        plan = solve_ot(x0[s:s + ot_batch], x1[s:s + ot_batch])
        out[s:s + ot_batch] = x1[s:s + ot_batch][plan.sigma]
    return x0, out


def velocity_pairs(model, x_t, t, n_per_anchor: int, n_tau: int, rng: np.random.Generator,
                   velocity_source=None):
    """OT-coupled ``(v0, v1)`` pairs for many anchors at once.

    Each anchor row of ``x_t`` (with time ``t``) gets ``n_per_anchor`` draws
    ``v0 ~ pi0`` pushed through the velocity ODE of ``model`` with ``n_tau``
    Euler steps; the two sets are then OT-coupled per anchor. Returns arrays
    ``(x_rep, t_rep, v0, v1)`` with ``len(x_t) * n_per_anchor`` rows, grouped
    by anchor.
    """
    from .sampling import integrate_velocity

    x_t = _as_batch(x_t)
    A, d = x_t.shape
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (A,))
    x_rep = np.repeat(x_t, n_per_anchor, axis=0)
    t_rep = np.repeat(t, n_per_anchor)
    if velocity_source is None:
        v0 = rng.standard_normal((A * n_per_anchor, d))
    else:
        v0 = velocity_source.draw(A * n_per_anchor, rng)
    v1 = integrate_velocity(model, (x_rep, t_rep), v0, n_tau)
    v1_coupled = np.empty_like(v1)
    for a in range(A):
        sl = slice(a * n_per_anchor, (a + 1) * n_per_anchor)
        plan = solve_ot(v0[sl], v1[sl])
        v1_coupled[sl] = v1[sl][plan.sigma]
    return x_rep, t_rep, v0, v1_coupled


def couple_velocity(anchor: SpaceTimePoint, B: int, model, n_tau: int = 100, seed: int = 0,
                    velocity_source=None) -> VelocityPairBatch:
    """Velocity coupling at one fixed space-time anchor.

    Draws ``B`` source velocities, integrates each to a target velocity with
    the pretrained ``model`` and OT-couples the two sets.
    """
    from .sampling import integrate_velocity

    if B < 1 or n_tau < 1:
        raise ValueError("B and n_tau must be >= 1")
    rng = make_rng(seed)
    d = anchor.dim
    v0 = rng.standard_normal((B, d)) if velocity_source is None else velocity_source.draw(B, rng)
    x = np.broadcast_to(anchor.x_t, (B, d))
    v1 = integrate_velocity(model, (x, anchor.t), v0, n_tau)
    plan = solve_ot(v0, v1)
    return VelocityPairBatch(anchor=anchor, v0=v0, v1=v1[plan.sigma], plan=plan)
