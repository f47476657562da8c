"""Ground-truth computations used to check the point-based machinery.

* :func:`exact_sfset` enumerates policy trees and keeps every successor matrix.
* :class:`MdpExactSupport` evaluates exact support functions of the
  horizon-H (or infinite-horizon) set of an MDP without enumeration: the
  support in direction ``m`` is a finite-horizon value-iteration problem.
* :func:`exact_state_polygons` builds the per-state 2-D sets of an MDP exactly.
* :func:`value_iteration` and :func:`pbvi_reference` are classic scalar solvers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dp import TIE_TOL, DirectionSet, assembled_support
from .errors import DimensionUnsupported, EnumerationTooLarge
from .model import mdp_from_psr
from .policy import DEFAULT_TREE_CAP, num_trees

DEDUP_TOL = 1e-12


def _as_matrices(M):
    M = M.matrices if isinstance(M, DirectionSet) else np.asarray(M, dtype=float)
    return M[None] if M.ndim == 2 else M


def _dedup_points(X, tol=DEDUP_TOL):
    """Drop matrices within ``tol`` (Frobenius) of an earlier one."""
    flat = X.reshape(len(X), -1)
    _, first = np.unique(flat, axis=0, return_index=True)
    flat = flat[np.sort(first)]
    keep = []
    for i, x in enumerate(flat):
        if not keep or np.min(np.linalg.norm(flat[keep] - x, axis=1)) >= tol:
            keep.append(i)
    return flat[keep].reshape((len(keep),) + X.shape[1:])


@dataclass(frozen=True, eq=False)
class ExactSet:
    """All successor matrices of depth-H deterministic trees (deduplicated)."""

    points: np.ndarray
    H: int
    fingerprint: str

    def support(self, M):
        M = _as_matrices(M)
        return (M.reshape(len(M), -1) @ self.points.reshape(len(self.points), -1).T).max(axis=1)


def exact_sfset(model, H, cap=DEFAULT_TREE_CAP):
    """Enumerate the successor matrices of every depth-H tree.

    Works level by level: the depth-h matrices are
    ``F_a + gamma sum_o X_o T_ao`` over actions and all choices of depth-(h-1)
    matrices ``X_o``, which yields exactly one matrix per tree. Duplicates are
    removed after every level, which does not change the resulting set.
    """
    if H < 0:
        raise ValueError("horizon must be nonnegative")
    A, O = model.num_actions, model.num_observations
    count = num_trees(A, O, H)
    if count > cap:
        raise EnumerationTooLarge(f"{count} trees at horizon {H} exceeds the cap of {cap}")
    level = np.zeros((1, model.d, model.k))
    for _ in range(H):
        # images of every current matrix under each T_ao: (A, O, n, d, k)
        imgs = np.zeros((A, O, len(level), model.d, model.k))
        for a in range(A):
            for o in range(O):
                rows = model.rows[a][o]
                if rows.size:
                    imgs[a, o] = level[:, :, rows] @ model.blocks[a][o]
        new = []
        for a in range(A):
            acc = np.array(model.F[a])[None]
            for o in range(O):
                if not model.rows[a][o].size:
                    continue
                acc = (acc[:, None] + model.gamma * imgs[a, o][None]).reshape(-1, model.d,
                                                                             model.k)
                acc = _dedup_points(acc)
            new.append(acc)
        level = _dedup_points(np.concatenate(new))
    return ExactSet(level, H, model.fingerprint)


# ---------------------------------------------------------------- MDP oracle

def _mdp_arrays(mdp):
    """(T (A, k, k) column-stochastic, f (k, A, d), gamma) from an MDP spec or embedding."""
    if hasattr(mdp, "transitions"):
        return np.asarray(mdp.transitions), np.asarray(mdp.features), mdp.gamma
    spec = mdp_from_psr(mdp)
    if spec is None:
        raise ValueError("model is not an MDP embedding")
    return np.asarray(spec.transitions), np.asarray(spec.features), spec.gamma


def finite_horizon_values(mdp, rewards, H, tol=0.0):
    """Optimal values for many linear rewards at once.

    ``rewards`` is ``(R, d)``; reward ``i`` is ``rewards[i] . f(s, a)``.
    Returns ``(R, k)`` values of horizon ``H`` (``H=None`` iterates to the
    fixed point, stopping when the sup-norm change is below ``tol``).
    """
    T, f, gamma = _mdp_arrays(mdp)
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    rew = np.einsum("sad,rd->rsa", f, rewards)
    V = np.zeros((len(rewards), T.shape[1]))
    steps = 0
    tol = tol if tol > 0 else 1e-13 * (1 + np.abs(rew).max()) / (1 - gamma)
    while True:
        if H is not None and steps >= H:
            break
        Q = rew + gamma * np.einsum("aij,ri->rja", T, V)
        newV = Q.max(axis=2)
        delta = np.abs(newV - V).max() if V.size else 0.0
        V = newV
        steps += 1
        if H is None and (delta < tol or steps > 100000):
            break
    return V


class MdpExactSupport:
    """Exact support function of the horizon-H set of an MDP embedding.

    For ``m`` (``d x k``), ``h(m) = max_a [<m, F_a> + gamma sum_o V_ao(o)]``
    where ``V_ao`` is the optimal horizon-(H-1) value for the reward
    ``g_ao . f`` and ``g_ao = m T_a[o, :]^T``. ``H=None`` gives the
    infinite-horizon set.
    """

    def __init__(self, model, H=None, tol=0.0):
        self.model = model
        self.H = H
        self.tol = tol
        self.T, self.f, self.gamma = _mdp_arrays(model)
        self.fingerprint = model.fingerprint

    def support(self, M):
        M = _as_matrices(M)
        N = len(M)
        T = self.T
        A, k, _ = T.shape
        Fm = np.einsum("ndk,adk->na", M, self.model.F)
        if self.H == 0:
            return np.zeros(N)
        g = np.einsum("ndk,aok->naod", M, T)  # g[n, a, o] = m T_a[o, :]^T
        inner = None if self.H is None else self.H - 1
        V = finite_horizon_values(self, g.reshape(-1, self.model.d), inner, self.tol)
        V = V.reshape(N, A, k, k)
        own = V[:, :, np.arange(k), np.arange(k)]  # value at state o for reward g_ao
        return (Fm + self.gamma * own.sum(axis=2)).max(axis=1)

    # duck-typing for finite_horizon_values
    @property
    def transitions(self):
        return self.T

    @property
    def features(self):
        return self.f


def exact_support(model, M, H=None):
    """Exact support of the horizon-H set: enumeration when small, MDP oracle otherwise."""
    if mdp_from_psr(model) is not None:
        return MdpExactSupport(model, H).support(M)
    if H is None:
        raise ValueError("infinite-horizon exact support needs an MDP")
    return exact_sfset(model, H).support(M)


@dataclass
class GapReport:
    matrix_gap: float
    state_gap: float

    @property
    def max(self):
        return max(self.matrix_gap, self.state_gap)

    def to_dict(self):
        return {"matrix_gap": self.matrix_gap, "state_gap": self.state_gap, "max": self.max}


def state_probes(states, feature_dirs):
    """Rank-one directions ``g q^T`` for every probe state and feature direction."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    G = np.atleast_2d(np.asarray(feature_dirs, dtype=float))
    return np.einsum("gd,sk->sgdk", G, states).reshape(-1, G.shape[1], states.shape[1])


def support_gap(exact, approx, model, probe_directions, probe_states=None, feature_dirs=None):
    """Largest support difference between an exact set and a point-based set.

    ``exact`` is anything with ``support(M)`` describing ``Phi^(H)``; the
    point-based set is read out through its stored pairs, which describe
    ``Phi^(iteration + 1)``. Matrix probes use ``probe_directions``; state
    probes maximize ``g . x`` over ``Phi q`` for every probe state ``q`` and
    feature direction ``g`` (default: 32 evenly spread unit vectors in 2-D,
    the coordinate axes and their negatives otherwise).
    """
    M = _as_matrices(probe_directions)
    matrix_gap = float(np.abs(exact.support(M) - assembled_support(model, approx, M)).max())
    state_gap = 0.0
    if probe_states is not None:
        if feature_dirs is None:
            if model.d == 2:
                th = 2 * np.pi * np.arange(32) / 32
                feature_dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
            else:
                feature_dirs = np.concatenate([np.eye(model.d), -np.eye(model.d)])
        S = state_probes(probe_states, feature_dirs)
        state_gap = float(np.abs(exact.support(S) - assembled_support(model, approx, S)).max())
    return GapReport(matrix_gap, state_gap)


# ---------------------------------------------------------------- 2-D geometry

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points, tol=1e-12):
    """Monotone-chain hull, counter-clockwise, collinear points removed."""
    pts = np.unique(np.round(np.asarray(points, dtype=float).reshape(-1, 2), 14), axis=0)
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= tol:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= tol:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _point_to_hull(x, hull):
    """Euclidean distance from ``x`` to the convex polygon with vertices ``hull`` (CCW)."""
    n = len(hull)
    if n == 1:
        return float(np.linalg.norm(x - hull[0]))
    if n > 2:
        inside = all(_cross(hull[i], hull[(i + 1) % n], x) >= -1e-15 for i in range(n))
        if inside:
            return 0.0
    best = np.inf
    edges = range(n) if n > 2 else range(1)
    for i in edges:
        a, b = hull[i], hull[(i + 1) % n]
        ab = b - a
        t = np.clip(np.dot(x - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(x - (a + t * ab))))
    return best


def hausdorff_2d(A, B):
    """Hausdorff distance between the convex hulls of two 2-D point clouds.

    The distance to a convex set is a convex function, so each one-sided
    term is attained at a vertex of the other hull.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != 2 or B.shape[1] != 2:
        raise DimensionUnsupported("hausdorff_2d needs (n, 2) point clouds")
    hA, hB = convex_hull_2d(A), convex_hull_2d(B)
    ab = max(_point_to_hull(x, hB) for x in hA)
    ba = max(_point_to_hull(x, hA) for x in hB)
    return max(ab, ba)


def _minkowski(P, Q):
    return convex_hull_2d((P[:, None, :] + Q[None, :, :]).reshape(-1, 2))


def exact_state_polygons(mdp, H):
    """Exact per-state sets ``Phi^(h) e_s`` for ``h = 0..H`` (d = 2 MDPs).

    Returns a list over ``h`` of lists over states of CCW hull vertices.
    ``Phi^(h) e_s = conv U_a [f(s, a) + gamma sum_s' P(s'|s, a) Phi^(h-1) e_s']``.
    """
    T, f, gamma = _mdp_arrays(mdp)
    A, k, _ = T.shape
    if f.shape[2] != 2:
        raise DimensionUnsupported("exact polygons are implemented for d = 2 only")
    polys = [[np.zeros((1, 2)) for _ in range(k)]]
    for _ in range(H):
        prev = polys[-1]
        cur = []
        for s in range(k):
            cands = []
            for a in range(A):
                acc = f[s, a][None, :]
                for s2 in np.flatnonzero(T[a][:, s]):
                    acc = _minkowski(acc, gamma * T[a][s2, s] * prev[s2])
                cands.append(acc)
            cur.append(convex_hull_2d(np.concatenate(cands)))
        polys.append(cur)
    return polys


def contraction_ratios(polys):
    """Per-step Hausdorff distances (max over states) and their successive ratios."""
    dists = np.array([max(hausdorff_2d(p, q) for p, q in zip(polys[h], polys[h + 1]))
                      for h in range(len(polys) - 1)])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = dists[1:] / dists[:-1]
    return dists, ratios


# ---------------------------------------------------------------- scalar solvers

def value_iteration(mdp, reward, tol=1e-12, max_iters=100000):
    """Optimal values of ``R(s, a) = r . f(s, a)`` by fixed-point iteration.

    Stops when the sup-norm change falls below ``tol``.
    """
    r = np.asarray(getattr(reward, "r", reward), dtype=float)
    T, f, gamma = _mdp_arrays(mdp)
    rew = f @ r
    V = np.zeros(T.shape[1])
    for _ in range(max_iters):
        Q = rew + gamma * np.einsum("aij,i->ja", T, V)
        newV = Q.max(axis=1)
        if np.abs(newV - V).max() < tol:
            return newV
        V = newV
    return V


def greedy_actions(mdp, reward, V):
    r = np.asarray(getattr(reward, "r", reward), dtype=float)
    T, f, gamma = _mdp_arrays(mdp)
    Q = f @ r + gamma * np.einsum("aij,i->ja", T, V)
    return np.argmax(Q >= Q.max(axis=1, keepdims=True) - 1e-12, axis=1)


def pbvi_reference(model, reward, sampled_states, iters):
    """Classic point-based value iteration on a PSR/POMDP.

    Starts from the single zero alpha vector and, at every sampled state,
    performs the usual point backup
    ``alpha_b = F_a^T r + gamma sum_o T_ao^T alpha*_{a,o}``. Returns the
    ``(B, k)`` alpha vectors of the last iteration (``(1, k)`` zeros when
    ``iters == 0``).

    Near-ties are resolved as in the set backup, whose scores at state ``b``
    are taken against the unit direction ``r b^T / (|r| |b|)``: the absolute
    tie tolerance is applied on that scale.
    """
    r = np.asarray(getattr(reward, "r", reward), dtype=float)
    B = np.atleast_2d(np.asarray(sampled_states, dtype=float))
    A, O = model.num_actions, model.num_observations
    base = np.einsum("adk,d->ak", model.F, r)
    Gamma = np.zeros((1, model.k))
    tol = TIE_TOL * np.linalg.norm(r) * np.linalg.norm(B, axis=1)
    for _ in range(iters):
        totals = np.empty((A, len(B)))
        backed = np.empty((A, len(B), model.k))
        for a in range(A):
            acc = np.repeat(base[a][None], len(B), axis=0)
            for o in range(O):
                rows = model.rows[a][o]
                if not rows.size:
                    continue
                # alpha^T T_ao b for every alpha and b
                TB = model.blocks[a][o] @ B.T
                scores = Gamma[:, rows] @ TB
                j = np.argmax(scores >= scores.max(axis=0, keepdims=True) - tol, axis=0)
                acc += model.gamma * (Gamma[j][:, rows] @ model.blocks[a][o])
            backed[a] = acc
            totals[a] = np.einsum("bk,bk->b", acc, B)
        a_star = np.argmax(totals >= totals.max(axis=0, keepdims=True) - tol, axis=0)
        Gamma = backed[a_star, np.arange(len(B))]
    return Gamma


def alpha_values(alphas, states):
    return (np.atleast_2d(states) @ np.asarray(alphas).T).max(axis=1)
