"""Point-based dynamic programming over successor feature sets.

The set of achievable successor matrices is never stored directly. For every
(action, observation) pair we keep a handful of boundary points of
``Phi_ao = Phi @ T_ao``, one per sampled direction, and rebuild everything
else from those with linear-maximization oracles.

Storage detail: a point ``X = psi @ T_ao`` depends on ``psi`` only through the
columns ``rows_ao`` where ``T_ao`` has nonzero rows, because
``X = psi[:, rows_ao] @ T_ao[rows_ao, :]``. We store the ``d x r`` *core*
``psi[:, rows_ao]``. For an MDP embedding ``r = 1``.

After ``t`` backups the stored pairs describe ``Phi^(t) T_ao`` and every
read-out (projections, values, alpha vectors) reflects ``Phi^(t+1)``.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DimensionMismatch, EmptySet

TIE_TOL = 1e-12
SCOPES = ("per_pair", "shared")


def first_argmax(values, axis=-1, tol=TIE_TOL):
    """Index of the first entry within ``tol`` of the maximum along ``axis``."""
    values = np.asarray(values)
    if values.ndim > 1 and 1 <= values.shape[axis] <= 8:
        # numpy reduces slowly over a short innermost axis; unroll it
        v = np.moveaxis(values, axis, 0)
        best = v[0].copy()
        for s in v[1:]:
            np.maximum(best, s, out=best)
        thr = best - tol
        idx = np.zeros(best.shape, dtype=np.int64)
        for i in range(len(v) - 1, -1, -1):
            idx[v[i] >= thr] = i
        return idx
    best = values.max(axis=axis, keepdims=True)
    return np.argmax(values >= best - tol, axis=axis)


@dataclass(frozen=True, eq=False)
class DirectionSet:
    """Unit-Frobenius-norm ``d x k`` directions, fixed for a DP run."""

    matrices: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        m = np.array(self.matrices, dtype=float)
        if m.ndim != 3 or not len(m):
            raise ValueError("directions must be a nonempty (N, d, k) array")
        norms = np.sqrt(np.einsum("ndk,ndk->n", m, m))
        if np.any(norms == 0):
            raise ValueError("directions must be nonzero")
        # leave unit directions untouched so stored sets reload bit-exactly
        off = np.abs(norms - 1.0) > 1e-12
        m[off] /= norms[off, None, None]
        m.setflags(write=False)
        object.__setattr__(self, "matrices", m)

    def __len__(self):
        return len(self.matrices)

    @property
    def shape(self):
        return self.matrices.shape[1:]

    def transformed(self, S):
        """Directions for the model re-expressed with ``q' = S q``.

        Maps ``m -> m S^T`` so inner products with ``X S^{-1}`` are preserved up
        to a positive per-direction scale.
        """
        return DirectionSet(self.matrices @ np.asarray(S, dtype=float).T, self.seed)


def sample_directions(seed, count, d, k):
    """``count`` standard-Gaussian ``d x k`` matrices, Frobenius-normalized."""
    if count < 1:
        raise ValueError("need at least one direction")
    rng = np.random.default_rng(seed)
    return DirectionSet(rng.standard_normal((count, d, k)), seed)


def support(points, m):
    """Support value and first maximizer of a finite set of matrices."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0 or len(pts) == 0:
        raise EmptySet("support of an empty set")
    m = np.asarray(m, dtype=float)
    vals = pts.reshape(len(pts), -1) @ m.reshape(-1)
    i = int(first_argmax(vals))
    return float(vals[i]), i


@dataclass
class BackupConfig:
    """Settings for :func:`point_based_backup` and :func:`run_dp`.

    ``scope='per_pair'`` applies each direction separately to every stored
    ``Phi_ao`` (directions score ``psi @ T_ao``). ``scope='shared'`` picks one
    extreme ``psi`` per direction over the whole backed-up set and stores its
    image in every pair; with directions ``r q_i^T`` this is exactly PBVI.
    """

    max_points: int | None = None
    monotone: bool = False
    incremental_subset: np.ndarray | None = None
    dedup_tol: float = 1e-10
    stop_matrix: np.ndarray | None = None
    max_iters: int = 1000
    convergence_tol: float | None = None
    scope: str = "per_pair"
    workers: int = 1

    def __post_init__(self):
        if self.max_points is not None and self.max_points < 1:
            raise ValueError("max_points must be at least 1")
        if self.dedup_tol <= 0:
            raise ValueError("dedup_tol must be positive")
        if self.convergence_tol is not None and self.convergence_tol < 0:
            raise ValueError("convergence_tol must be nonnegative")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")

    def tolerance_for(self, model):
        if self.convergence_tol is not None:
            return self.convergence_tol
        fmax = max(np.linalg.norm(model.F[a]) for a in range(model.num_actions))
        return 1e-8 * fmax / (1.0 - model.gamma)


@dataclass(frozen=True, eq=False)
class SFSet:
    """Point-based successor feature set.

    Attributes
    ----------
    cores : nested tuple ``[a][o]`` of ``(n_ao, d, r_ao)`` arrays
        Stored boundary points of ``Phi_ao`` in row-factored form.
    point_of : ``(A, O, N)`` int array
        Index of the stored point that direction ``i`` retained in pair (a, o).
    origin_action, origin_direction : nested tuples ``[a][o]`` of int arrays
        Root action and generating direction of each stored point
        (action ``-1`` marks an initial point).
    values : array
        Per-direction support values that were optimized: ``(A, O, N)`` in
        per-pair scope, ``(N,)`` in shared scope.
    """

    cores: tuple
    point_of: np.ndarray
    origin_action: tuple
    origin_direction: tuple
    directions: DirectionSet
    values: np.ndarray
    iteration: int = 0
    fingerprint: str = ""
    scope: str = "per_pair"

    @property
    def num_actions(self):
        return len(self.cores)

    @property
    def num_observations(self):
        return len(self.cores[0])

    @property
    def d(self):
        return self.cores[0][0].shape[1]

    def num_points(self, a=None, o=None):
        if a is not None:
            return len(self.cores[a][o])
        return sum(len(c) for row in self.cores for c in row)

    def points(self, model, a, o):
        """Full ``(n, d, k)`` stored points of ``Phi_ao``."""
        return np.einsum("ndr,rk->ndk", self.cores[a][o], model.blocks[a][o])


def _segment_sum(values, starts, counts):
    """Sum consecutive row segments; empty segments give zero."""
    out = np.zeros((len(counts),) + values.shape[1:])
    nz = counts > 0
    if values.shape[0] and nz.any():
        out[nz] = np.add.reduceat(values, starts[nz], axis=0)
    return out


class _Engine:
    """Padded, batched layout of the backup for one model.

    Pairs (a, o) with ``T_ao != 0`` are indexed ``p``; cores are padded to
    ``rmax`` rows. An *edge* ``e`` links a target pair ``p`` and a candidate
    root action ``a2`` to a source pair ``(a2, o2)`` whose operator touches the
    columns of ``p``; ``K[e] = T_{a2 o2}[rows_src, rows_p]``. Edges are sorted
    by ``(p, a2, o2)``.
    """

    BUDGET = 2**22

    def __init__(self, model):
        self.model = model
        A, O, d = model.num_actions, model.num_observations, model.d
        self.pairs = [(a, o) for a in range(A) for o in range(O) if model.rows[a][o].size]
        P = len(self.pairs)
        self.pair_index = np.full((A, O), -1, dtype=np.int64)
        for p, (a, o) in enumerate(self.pairs):
            self.pair_index[a, o] = p
        self.action_of = np.array([a for a, _ in self.pairs], dtype=np.int64)
        self.r = np.array([model.rows[a][o].size for a, o in self.pairs], dtype=np.int64)
        rmax = self.rmax = int(self.r.max()) if P else 1
        self.R = np.zeros((P, rmax, model.k))
        self.Frho = np.zeros((P, A, d, rmax))
        self.L = np.zeros((P, rmax, rmax))
        colsupp = model.column_support
        p_e, a2_e, src_e, Ks = [], [], [], []
        for p, (a, o) in enumerate(self.pairs):
            rho = model.rows[a][o]
            r = rho.size
            B = model.blocks[a][o]
            self.R[p, :r] = B
            self.Frho[p, :, :, :r] = model.F[:, :, rho]
            lam, V = np.linalg.eigh(B @ B.T)
            self.L[p, :r, :r] = V * np.sqrt(np.clip(lam, 0.0, None))
            for a2 in range(A):
                for o2 in np.flatnonzero(colsupp[a2][:, rho].any(axis=1)):
                    K = np.zeros((rmax, rmax))
                    blk = model.blocks[a2][o2][:, rho]
                    K[:blk.shape[0], :r] = blk
                    p_e.append(p)
                    a2_e.append(a2)
                    src_e.append(self.pair_index[a2, o2])
                    Ks.append(K)
        self.p_e = np.array(p_e, dtype=np.int64)
        self.a2_e = np.array(a2_e, dtype=np.int64)
        self.src_e = np.array(src_e, dtype=np.int64)
        self.o2_e = np.array([self.pairs[s][1] for s in src_e], dtype=np.int64)
        self.K = np.array(Ks).reshape(len(Ks), rmax, rmax)
        self.edge_start = np.searchsorted(self.p_e, np.arange(P + 1))
        group = self.p_e * A + self.a2_e
        self.group_start = np.searchsorted(group, np.arange(P * A))
        self.group_count = np.bincount(group, minlength=P * A)
        self._gcache = None

    # -- layout helpers
    def project(self, M):
        """Directions seen by every pair: ``G[p, n] = M_n R_p^T`` (``(P, N, d, rmax)``)."""
        if isinstance(M, DirectionSet):
            if self._gcache is not None and self._gcache[0] is M:
                return self._gcache[1]
            G = np.einsum("ndk,prk->pndr", M.matrices, self.R)
            self._gcache = (M, G)
            return G
        return np.einsum("ndk,prk->pndr", np.asarray(M, dtype=float), self.R)

    def padded(self, sfset):
        P = len(self.pairs)
        J = max([sfset.num_points(a, o) for a, o in self.pairs] or [1])
        C = np.zeros((P, J, self.model.d, self.rmax))
        valid = np.zeros((P, J), dtype=bool)
        for p, (a, o) in enumerate(self.pairs):
            c = sfset.cores[a][o]
            C[p, :len(c), :, :c.shape[2]] = c
            valid[p, :len(c)] = True
        return C, valid

    def chunks(self, N, J):
        """Contiguous pair ranges whose edge work fits the memory budget."""
        per_edge = max(1, N * max(J, self.model.d * self.rmax))
        limit = max(1, self.BUDGET // per_edge)
        P = len(self.pairs)
        p0 = 0
        while p0 < P:
            p1 = p0 + 1
            while p1 < P and self.edge_start[p1 + 1] - self.edge_start[p0] <= limit:
                p1 += 1
            yield p0, p1
            p0 = p1

    # -- core computations
    def edge_best(self, G, C, valid, e0, e1):
        """Best stored point of each source pair for every edge and direction."""
        src = self.src_e[e0:e1]
        H = G[self.p_e[e0:e1]] @ self.K[e0:e1, None].transpose(0, 1, 3, 2)
        E, N = H.shape[:2]
        Cs = C[src]
        scores = H.reshape(E, N, -1) @ Cs.reshape(E, Cs.shape[1], -1).transpose(0, 2, 1)
        scores = np.where(valid[src][:, None, :], scores, -np.inf)
        j = first_argmax(scores, axis=2)
        best = np.take_along_axis(scores, j[:, :, None], axis=2)[:, :, 0]
        return best, j

    def totals(self, G, best, p0, p1):
        """Backup value of every root action: ``(p1 - p0, A, N)``."""
        A = self.model.num_actions
        out = np.einsum("pndr,padr->pan", G[p0:p1], self.Frho[p0:p1])
        g0, g1 = p0 * A, p1 * A
        starts = self.group_start[g0:g1] - self.edge_start[p0]
        sums = _segment_sum(best, starts, self.group_count[g0:g1])
        return out + self.model.gamma * sums.reshape(p1 - p0, A, -1)

    def assemble(self, a_star, j, C, p0, p1):
        """New cores for the chosen root actions: ``(p1 - p0, N, d, rmax)``."""
        e0, e1 = self.edge_start[p0], self.edge_start[p1]
        loc = self.p_e[e0:e1] - p0
        base = np.take_along_axis(self.Frho[p0:p1], a_star[:, :, None, None], axis=1)
        sel = a_star[loc] == self.a2_e[e0:e1, None]
        pts = C[self.src_e[e0:e1, None], j]
        contrib = (pts @ self.K[e0:e1, None]) * sel[:, :, None, None]
        starts = self.edge_start[p0:p1] - e0
        counts = self.edge_start[p0 + 1:p1 + 1] - self.edge_start[p0:p1]
        return base + self.model.gamma * _segment_sum(contrib, starts, counts)

    def backup_values(self, G, C, valid):
        """Per-pair backed-up supports ``(P, N)`` (no assembly)."""
        out = np.empty((len(self.pairs), G.shape[1]))
        for p0, p1 in self.chunks(G.shape[1], C.shape[1]):
            best, _ = self.edge_best(G, C, valid, self.edge_start[p0], self.edge_start[p1])
            out[p0:p1] = self.totals(G, best, p0, p1).max(axis=1)
        return out

    def stored_supports(self, G, C, valid):
        """Support of each stored pair and its first maximizer, ``(P, N)`` each."""
        P, N = G.shape[:2]
        sup = np.empty((P, N))
        arg = np.empty((P, N), dtype=np.int64)
        step = max(1, self.BUDGET // max(1, N * C.shape[1]))
        for p0 in range(0, P, step):
            g, c = G[p0:p0 + step], C[p0:p0 + step]
            sc = g.reshape(len(g), N, -1) @ c.reshape(len(c), c.shape[1], -1).transpose(0, 2, 1)
            sc = np.where(valid[p0:p0 + step, None, :], sc, -np.inf)
            j = first_argmax(sc, axis=2)
            arg[p0:p0 + step] = j
            sup[p0:p0 + step] = np.take_along_axis(sc, j[:, :, None], axis=2)[:, :, 0]
        return sup, arg

    def to_pairs(self, values_pn, N, fill=0.0):
        out = np.full((self.model.num_actions, self.model.num_observations, N), fill)
        for p, (a, o) in enumerate(self.pairs):
            out[a, o] = values_pn[p]
        return out


def _engine(model):
    eng = model.__dict__.get("_sfset_engine")
    if eng is None:
        eng = _Engine(model)
        model.__dict__["_sfset_engine"] = eng
    return eng


def initial_set(model, directions, config=None):
    """Horizon-0 set: ``{0}`` or, for stoppable problems, ``{stop_matrix}``."""
    config = config or BackupConfig()
    A, O, N = model.num_actions, model.num_observations, len(directions)
    if directions.shape != (model.d, model.k):
        raise DimensionMismatch(f"directions are {directions.shape}, model needs "
                                f"({model.d}, {model.k})")
    stop = config.stop_matrix
    if stop is None:
        stop = np.zeros((model.d, model.k))
    stop = np.asarray(stop, dtype=float)
    if stop.shape != (model.d, model.k):
        raise DimensionMismatch("stop_matrix must be d x k")
    cores = tuple(tuple(stop[None, :, model.rows[a][o]].copy() for o in range(O))
                  for a in range(A))
    minus = tuple(tuple(np.full(1, -1, dtype=np.int64) for _ in range(O)) for _ in range(A))
    M = directions.matrices
    if config.scope == "shared":
        values = np.einsum("ndk,dk->n", M, stop)
    else:
        values = np.zeros((A, O, N))
        for a in range(A):
            for o in range(O):
                if model.rows[a][o].size:
                    X = stop[:, model.rows[a][o]] @ model.blocks[a][o]
                    values[a, o] = np.einsum("ndk,dk->n", M, X)
    return SFSet(cores=cores, point_of=np.zeros((A, O, N), dtype=np.int64),
                 origin_action=minus, origin_direction=minus, directions=directions,
                 values=values, iteration=0, fingerprint=model.fingerprint,
                 scope=config.scope)


def _dedup(cores, L, tol):
    """Greedy first-occurrence dedup under the metric ``||(C_i - C_j) R||_F``.

    ``L`` factors ``R R^T = L L^T``. Returns kept indices and, for every
    input, the index of its representative among the kept ones.
    """
    N = len(cores)
    flat = cores.reshape(N, -1)
    _, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    reps = first[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    X = (cores[reps] @ L).reshape(len(reps), -1)
    rep_of = np.arange(len(reps))
    if len(reps) > 1:
        diff = X[:, None, :] - X[None, :, :]
        close = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) < tol
        rep_of = np.argmax(close, axis=1)
        rep_of = rep_of[rep_of]
    keep_local = np.flatnonzero(rep_of == np.arange(len(reps)))
    new_index = np.full(len(reps), -1, dtype=np.int64)
    new_index[keep_local] = np.arange(len(keep_local))
    return reps[keep_local], new_index[rep_of][rank[inverse]]


def _truncate(keep, index, limit):
    # keep the points of the first `limit` distinct directions; orphans use point 0
    remap = np.full(len(keep), 0, dtype=np.int64)
    remap[:limit] = np.arange(limit)
    return keep[:limit], remap[index]


def _update_mask(config, N):
    mask = np.ones(N, dtype=bool)
    if config.incremental_subset is not None:
        mask[:] = False
        mask[np.asarray(config.incremental_subset, dtype=np.int64)] = True
    return mask


def point_based_backup(model, current: SFSet, config: BackupConfig | None = None):
    """One point-based Bellman backup of ``current``.

    For each direction ``m_i`` and pair (a, o) the new boundary point is the
    maximizer of ``<m_i, phi>`` over
    ``union_{a'} [F_{a'} + gamma sum_{o'} Phi_{a'o'}] T_ao``; the max passes
    through the Minkowski sum, so each ``o'`` is solved independently.
    """
    config = config or BackupConfig(scope=current.scope)
    if current.fingerprint and current.fingerprint != model.fingerprint:
        raise DimensionMismatch("SFSet was built for a different model")
    if current.directions.shape != (model.d, model.k):
        raise DimensionMismatch("direction shape does not match the model")
    if config.scope != current.scope:
        raise ValueError("backup scope differs from the set's scope")
    if config.scope == "shared":
        return _shared_backup(model, current, config)
    return _per_pair_backup(model, current, config)


def _finish(model, current, eng, newC, new_vals, origin_a, origin_d, config):
    """Apply monotone/incremental rules, dedup, and package a new SFSet.

    ``newC``, ``origin_a`` and ``origin_d`` are ``(P, N, ...)`` candidate
    arrays; ``new_vals`` is ``(P, N)`` or ``(N,)`` (shared scope).
    """
    A, O = model.num_actions, model.num_observations
    N = len(current.directions)
    update = _update_mask(config, N)
    shared = current.scope == "shared"
    if shared:
        keep_old = ~update
        if config.monotone:
            keep_old = keep_old | (current.values > new_vals)
        values = np.where(keep_old, current.values, new_vals)
    else:
        old_vals = np.array([current.values[a, o] for a, o in eng.pairs]).reshape(-1, N)
        keep_old = np.broadcast_to(~update, old_vals.shape)
        if config.monotone:
            keep_old = keep_old | (old_vals > new_vals)
        values_p = np.where(keep_old, old_vals, new_vals)
    cores = [list(row) for row in current.cores]
    oa = [list(row) for row in current.origin_action]
    od = [list(row) for row in current.origin_direction]
    point_of = np.array(current.point_of)
    for p, (a, o) in enumerate(eng.pairs):
        r = eng.r[p]
        c = newC[p, :, :, :r]
        pa, pd = origin_a[p].copy(), origin_d[p].copy()
        ko = keep_old if shared else keep_old[p]
        if ko.any():
            idx = current.point_of[a, o][ko]
            c = c.copy()
            c[ko] = current.cores[a][o][idx]
            pa[ko] = current.origin_action[a][o][idx]
            pd[ko] = current.origin_direction[a][o][idx]
        keep, index = _dedup(c, eng.L[p, :r, :r], config.dedup_tol)
        if config.max_points is not None and len(keep) > config.max_points:
            keep, index = _truncate(keep, index, config.max_points)
        cores[a][o] = np.ascontiguousarray(c[keep])
        oa[a][o] = pa[keep]
        od[a][o] = pd[keep]
        point_of[a, o] = index
    if not shared:
        values = eng.to_pairs(values_p, N)
        values[~(eng.pair_index >= 0)] = current.values[~(eng.pair_index >= 0)]
    return SFSet(cores=tuple(map(tuple, cores)), point_of=point_of,
                 origin_action=tuple(map(tuple, oa)), origin_direction=tuple(map(tuple, od)),
                 directions=current.directions, values=values,
                 iteration=current.iteration + 1, fingerprint=model.fingerprint,
                 scope=current.scope)


def _per_pair_backup(model, current, config):
    eng = _engine(model)
    G = eng.project(current.directions)
    C, valid = eng.padded(current)
    P, N = G.shape[:2]
    newC = np.empty((P, N, model.d, eng.rmax))
    new_vals = np.empty((P, N))
    a_star = np.empty((P, N), dtype=np.int64)

    def work(chunk):
        p0, p1 = chunk
        best, j = eng.edge_best(G, C, valid, eng.edge_start[p0], eng.edge_start[p1])
        tot = eng.totals(G, best, p0, p1)
        a = first_argmax(tot, axis=1)
        a_star[p0:p1] = a
        new_vals[p0:p1] = np.take_along_axis(tot, a[:, None, :], axis=1)[:, 0]
        newC[p0:p1] = eng.assemble(a, j, C, p0, p1)

    chunks = list(eng.chunks(N, C.shape[1]))
    if config.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            list(pool.map(work, chunks))
    else:
        for ch in chunks:
            work(ch)
    origin_d = np.broadcast_to(np.arange(N), (P, N))
    return _finish(model, current, eng, newC, new_vals, a_star, origin_d, config)


def _shared_totals(model, eng, sfset, M):
    """Whole-set backup values ``(A, N)`` plus per-pair supports and maximizers."""
    G = eng.project(M)
    C, valid = eng.padded(sfset)
    sup, arg = eng.stored_supports(G, C, valid)
    Mm = M.matrices if isinstance(M, DirectionSet) else np.asarray(M, dtype=float)
    totals = np.einsum("ndk,adk->an", Mm, model.F)
    for a in range(model.num_actions):
        mask = eng.action_of == a
        totals[a] += model.gamma * sup[mask].sum(axis=0)
    return totals, arg


def extreme_points(model, sfset, M):
    """Maximizers of ``<m, psi>`` over the backed-up set, one per direction.

    Returns ``(psi, a_star, values)`` with ``psi`` of shape ``(N, d, k)``:
    ``psi_n = F_a* + gamma sum_o phi_o`` with each ``phi_o`` the best stored
    point of ``Phi_{a* o}``.
    """
    eng = _engine(model)
    totals, arg = _shared_totals(model, eng, sfset, M)
    N = totals.shape[1]
    a_star = first_argmax(totals, axis=0)
    psi = np.array(model.F[a_star])
    for p, (a, o) in enumerate(eng.pairs):
        sel = a_star == a
        if sel.any():
            psi[sel] += model.gamma * (sfset.cores[a][o][arg[p, sel]] @ model.blocks[a][o])
    return psi, a_star, totals[a_star, np.arange(N)]


def _shared_backup(model, current, config):
    eng = _engine(model)
    N = len(current.directions)
    psi, a_star, new_vals = extreme_points(model, current, current.directions)
    P = len(eng.pairs)
    newC = np.zeros((P, N, model.d, eng.rmax))
    for p, (a, o) in enumerate(eng.pairs):
        newC[p, :, :, :eng.r[p]] = psi[:, :, model.rows[a][o]]
    origin_a = np.broadcast_to(a_star, (P, N))
    origin_d = np.broadcast_to(np.arange(N), (P, N))
    return _finish(model, current, eng, newC, new_vals, origin_a, origin_d, config)


def _as_matrices(M):
    return M.matrices if isinstance(M, DirectionSet) else np.asarray(M, dtype=float)


def pair_supports(model, sfset, M):
    """Support of every stored ``Phi_ao`` in directions ``M``: ``(A, O, N)``."""
    eng = _engine(model)
    sup, _ = eng.stored_supports(eng.project(M), *eng.padded(sfset))
    return eng.to_pairs(sup, len(_as_matrices(M)))


def backed_up_pair_supports(model, sfset, M):
    """Support of the exact-form backup of the stored set, per pair: ``(A, O, N)``."""
    eng = _engine(model)
    vals = eng.backup_values(eng.project(M), *eng.padded(sfset))
    return eng.to_pairs(vals, len(_as_matrices(M)))


def assembled_support(model, sfset, M):
    """Support of ``conv U_a [F_a + gamma sum_o Phi_ao]`` in directions ``M``.

    This is the horizon ``iteration + 1`` set read out of the stored pairs.
    """
    M = _as_matrices(M)
    single = M.ndim == 2
    if single:
        M = M[None]
    totals, _ = _shared_totals(model, _engine(model), sfset, M)
    out = totals.max(axis=0)
    return float(out[0]) if single else out


@dataclass
class BellmanErrors:
    """Signed per-pair errors ``h_backup(m) - h_stored(m)``, shape ``(N, A, O)``."""

    signed: np.ndarray

    @property
    def per_direction(self):
        return np.abs(self.signed).reshape(len(self.signed), -1).max(axis=1)

    @property
    def max(self):
        return float(self.per_direction.max()) if self.signed.size else 0.0


def bellman_error(model, sfset, eval_directions):
    """Bellman error of the stored set in arbitrary directions.

    ``eval_directions`` may be the set's own (optimized) directions or fresh
    ones; a :class:`DirectionSet` or an ``(N, d, k)`` array.
    """
    eng = _engine(model)
    G = eng.project(eval_directions)
    C, valid = eng.padded(sfset)
    old, _ = eng.stored_supports(G, C, valid)
    new = eng.backup_values(G, C, valid)
    diff = eng.to_pairs(new - old, G.shape[1])
    return BellmanErrors(np.transpose(diff, (2, 0, 1)))


@dataclass
class Trace:
    """Per-iteration record of a DP run."""

    iterations: list = field(default_factory=list)
    max_error_optimized: list = field(default_factory=list)
    max_error_fresh: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    fresh_per_seed: list = field(default_factory=list)
    supports: list = field(default_factory=list)
    converged: bool = False
    # standard errors read back from CSV, where per-seed values are not stored
    loaded_std_error: list = field(default_factory=list)

    CSV_VERSION = "# sfsets trace v1"
    CSV_COLUMNS = ("iteration", "max_error_optimized", "max_error_fresh", "fresh_std_error")

    def fresh_std_error(self, i):
        if self.loaded_std_error:
            return self.loaded_std_error[i]
        vals = np.asarray(self.fresh_per_seed[i], dtype=float) if self.fresh_per_seed else []
        if len(vals) < 2 or np.isnan(vals).any():
            return float("nan")
        return float(vals.std(ddof=1) / np.sqrt(len(vals)))

    def to_csv(self, timing=False):
        """CSV text. Wall-clock times are only written with ``timing=True`` so
        that repeated runs produce identical files by default."""
        cols = self.CSV_COLUMNS + (("wall_time",) if timing else ())
        lines = [self.CSV_VERSION + "\n", ",".join(cols) + "\n"]
        for i, it in enumerate(self.iterations):
            row = [self.max_error_optimized[i], self.max_error_fresh[i], self.fresh_std_error(i)]
            if timing:
                row.append(self.wall_time[i])
            lines.append(",".join([str(int(it))] + [repr(float(v)) for v in row]) + "\n")
        return "".join(lines)

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        if not lines or lines[0].strip() != cls.CSV_VERSION:
            raise ValueError("not an sfsets trace v1 file")
        cols = lines[1].split(",")
        tr = cls()
        for line in lines[2:]:
            if not line:
                continue
            rec = dict(zip(cols, line.split(",")))
            tr.iterations.append(int(rec["iteration"]))
            tr.max_error_optimized.append(float(rec["max_error_optimized"]))
            tr.max_error_fresh.append(float(rec["max_error_fresh"]))
            tr.loaded_std_error.append(float(rec.get("fresh_std_error", "nan")))
            if "wall_time" in rec:
                tr.wall_time.append(float(rec["wall_time"]))
        return tr


def _stored_values(model, sfset):
    eng = _engine(model)
    sup, _ = eng.stored_supports(eng.project(sfset.directions), *eng.padded(sfset))
    return sup


def run_dp(model, config: BackupConfig | None = None, directions: DirectionSet | None = None,
           fresh=(), fresh_every=1, record_supports=False, start=None):
    """Iterate point-based backups from the horizon-0 set until convergence.

    The optimized-direction error of iteration ``t`` is the largest change of
    a stored pair's support between iterates ``t - 1`` and ``t``, i.e. the
    Bellman error of iterate ``t - 1`` in its own directions.

    Parameters
    ----------
    fresh : sequence of DirectionSet
        Independent direction sets for the fresh-direction error column; the
        column holds the mean over sets of each set's largest Bellman error
        (of the iterate being backed up).
    fresh_every : int
        Evaluate fresh errors every this many iterations (others are NaN);
        the final iteration is always evaluated.
    record_supports : bool
        Keep each iterate's stored-pair supports ``(P, N)`` in the trace.
    start : SFSet, optional
        Resume from this set instead of the horizon-0 set.

    Returns
    -------
    (SFSet, Trace)
    """
    config = config or BackupConfig()
    if directions is None:
        directions = sample_directions(0, 50, model.d, model.k)
    current = start if start is not None else initial_set(model, directions, config)
    tol = config.tolerance_for(model)
    trace = Trace()
    old_h = _stored_values(model, current)
    if record_supports:
        trace.supports.append(old_h)
    t0 = time.perf_counter()
    for it in range(1, config.max_iters + 1):
        new = point_based_backup(model, current, config)
        new_h = _stored_values(model, new)
        change = float(np.abs(new_h - old_h).max()) if new_h.size else 0.0
        stop = change < tol or model.gamma == 0.0
        fresh_vals = np.full(len(fresh), np.nan)
        if len(fresh) and (stop or it == config.max_iters or it % fresh_every == 0):
            fresh_vals = np.array([bellman_error(model, current, fs).max for fs in fresh])
        trace.iterations.append(it)
        trace.max_error_optimized.append(change)
        trace.max_error_fresh.append(float(fresh_vals.mean()) if len(fresh) else float("nan"))
        trace.fresh_per_seed.append(fresh_vals)
        trace.wall_time.append(time.perf_counter() - t0)
        if record_supports:
            trace.supports.append(new_h)
        current, old_h = new, new_h
        if stop:
            trace.converged = True
            break
    return current, trace


class ProjectedSet:
    """The sets ``Phi_a q = F_a q + gamma sum_o Phi_ao q`` at one state ``q``.

    Vertices are not enumerated; :meth:`lmo` returns the maximizing vertex in
    a feature-space direction together with its annotation (the stored point
    index chosen for every observation).
    """

    def __init__(self, sfset, model, q):
        self.sfset = sfset
        self.model = model
        self.q = np.asarray(q, dtype=float)
        A, O = model.num_actions, model.num_observations
        self.base = np.einsum("adk,k->ad", model.F, self.q)
        self.points = [[None] * O for _ in range(A)]
        self.active = []
        for a in range(A):
            act = []
            for o in range(O):
                rq = model.blocks[a][o] @ self.q
                pts = np.einsum("ndr,r->nd", sfset.cores[a][o], rq)
                self.points[a][o] = pts
                if np.any(rq != 0.0):
                    act.append(o)
            self.active.append(act)

    @property
    def gamma(self):
        return self.model.gamma

    def lmo_action(self, a, g):
        """Maximize ``g . x`` over ``Phi_a q``; returns ``(value, vertex, annotation)``."""
        g = np.asarray(g, dtype=float)
        ann = np.zeros(self.model.num_observations, dtype=np.int64)
        vertex = self.base[a].copy()
        for o in self.active[a]:
            pts = self.points[a][o]
            j = int(first_argmax(pts @ g))
            ann[o] = j
            vertex += self.gamma * pts[j]
        return float(vertex @ g), vertex, ann

    def lmo(self, g):
        """Maximize over ``Phi q``; returns ``(value, action, vertex, annotation)``."""
        best = None
        for a in range(self.model.num_actions):
            val, vertex, ann = self.lmo_action(a, g)
            if best is None or val > best[0] + TIE_TOL:
                best = (val, a, vertex, ann)
        return best

    def support(self, g):
        return self.lmo(g)[0]

    def vertex(self, a, annotation):
        v = self.base[a].copy()
        for o in self.active[a]:
            v += self.gamma * self.points[a][o][annotation[o]]
        return v

    def vertices(self, a, limit=10**4):
        """Brute-force list of ``(vertex, annotation)`` over all combinations."""
        act = self.active[a]
        sizes = [len(self.points[a][o]) for o in act]
        if int(np.prod(sizes, dtype=float)) > limit:
            raise ValueError("too many combinations to enumerate")
        out = []
        for combo in product(*[range(s) for s in sizes]):
            ann = np.zeros(self.model.num_observations, dtype=np.int64)
            ann[act] = combo
            out.append((self.vertex(a, ann), ann))
        return out


def project_set(sfset, model, q):
    """Project the set onto state ``q`` (see :class:`ProjectedSet`)."""
    return ProjectedSet(sfset, model, q)


def provenance(sfset, model, a, o, j):
    """Recover the decomposition of stored point ``j`` of pair (a, o).

    The point was built as ``[F_a* + gamma sum_o' phi_o'] T_ao``. Returns
    ``(a*, annotation)`` where ``annotation[o']`` indexes the point of
    ``Phi_{a* o'}`` that wins in the generating direction, evaluated on the
    current set (at a fixed point this is exactly the original choice).
    Returns ``None`` for initial points.
    """
    a_star = int(sfset.origin_action[a][o][j])
    if a_star < 0:
        return None
    eng = _engine(model)
    n = int(sfset.origin_direction[a][o][j])
    O = model.num_observations
    ann = np.zeros(O, dtype=np.int64)
    if sfset.scope == "shared":
        m = sfset.directions.matrices[n]
        for o2 in range(O):
            if len(model.blocks[a_star][o2]):
                g = m @ model.blocks[a_star][o2].T
                sc = np.einsum("dr,jdr->j", g, sfset.cores[a_star][o2])
                ann[o2] = int(first_argmax(sc))
        return a_star, ann
    p = eng.pair_index[a, o]
    G = eng.project(sfset.directions)[p, n]
    for e in range(eng.edge_start[p], eng.edge_start[p + 1]):
        if eng.a2_e[e] != a_star:
            continue
        o2 = eng.o2_e[e]
        H = G @ eng.K[e].T
        C = sfset.cores[a_star][o2]
        sc = np.einsum("dr,jdr->j", H[:, :C.shape[2]], C)
        ann[o2] = int(first_argmax(sc))
    return a_star, ann


# ------------------------------------------------------------ serialization

_MAGIC = b"SFSET1\n"


def save_sfset(sfset, path, extra=None):
    """Write a deterministic binary artifact: magic line, JSON header line, raw arrays.

    Arrays are little-endian ``float64``/``int64`` in row-major order, at the
    byte offsets listed in the header.
    """
    A, O = sfset.num_actions, sfset.num_observations
    arrays = [("directions", sfset.directions.matrices), ("point_of", sfset.point_of),
              ("values", sfset.values)]
    for a in range(A):
        for o in range(O):
            arrays.append((f"cores/{a}/{o}", sfset.cores[a][o]))
            arrays.append((f"origin_action/{a}/{o}", sfset.origin_action[a][o]))
            arrays.append((f"origin_direction/{a}/{o}", sfset.origin_direction[a][o]))
    entries = []
    offset = 0
    for name, arr in arrays:
        arr = np.asarray(arr)
        dtype = "<f8" if arr.dtype.kind == "f" else "<i8"
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset})
        offset += arr.size * 8
    d, k = sfset.directions.shape
    header = {"fingerprint": sfset.fingerprint, "d": d, "k": k, "A": A, "O": O,
              "iteration": sfset.iteration, "seed": sfset.directions.seed,
              "scope": sfset.scope, "arrays": entries, "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for (_, arr), e in zip(arrays, entries):
            fh.write(np.ascontiguousarray(arr, dtype=e["dtype"]).tobytes())


def read_sfset_header(path):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not an SFSet artifact")
        return json.loads(fh.readline())


def load_sfset(path):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not an SFSet artifact")
        header = json.loads(fh.readline())
        blob = fh.read()
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=e["dtype"], count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(
            float if e["dtype"] == "<f8" else np.int64)
    A, O = header["A"], header["O"]

    def nested(prefix):
        return tuple(tuple(arrays[f"{prefix}/{a}/{o}"] for o in range(O)) for a in range(A))

    return SFSet(cores=nested("cores"), point_of=arrays["point_of"],
                 origin_action=nested("origin_action"),
                 origin_direction=nested("origin_direction"),
                 directions=DirectionSet(arrays["directions"], header["seed"]),
                 values=arrays["values"], iteration=header["iteration"],
                 fingerprint=header["fingerprint"], scope=header["scope"])
