"""Feature matching: act so that expected discounted features equal a target.

At every step the target is written as a convex combination of vertices of
``Phi q``. Each vertex ``F_a q + gamma sum_o X_o q`` carries an annotation
(which stored point ``X_o`` of ``Phi_ao`` it uses), so after playing ``a`` and
seeing ``o`` the next target is ``X_o q / P(o)``, itself the image of a stored
point. Following that point's provenance gives the next vertex directly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dp import project_set, provenance
from .errors import InfeasibleTarget
from .model import observation_probs, psr_update

logger = logging.getLogger(__name__)

EPS_FEAS = 1e-6
EPS_FW = 1e-8
MAX_FW_ITERS = 10**4


@dataclass
class MatchState:
    q: np.ndarray
    target: np.ndarray
    t: int = 0


@dataclass
class DecompEntry:
    action: int
    weight: float
    vertex: np.ndarray
    annotation: np.ndarray


@dataclass
class Decomposition:
    entries: list
    residual: float
    history: list = field(default_factory=list)

    @property
    def weights(self):
        return np.array([e.weight for e in self.entries])

    def mean(self):
        return sum(e.weight * e.vertex for e in self.entries)


@dataclass
class Feasibility:
    feasible: bool
    distance: float
    nearest: np.ndarray
    decomposition: Decomposition


def _frank_wolfe(proj, target, tol, max_iters=MAX_FW_ITERS):
    """Away-step Frank-Wolfe for ``min ||x - target||^2`` over ``Phi q``.

    Starts from the lowest-index action's vertex in the target direction.
    Stops once the distance is at most ``tol``, once the duality gap
    vanishes (the target is outside and ``x`` is its projection), or after
    ``max_iters`` iterations.
    """
    target = np.asarray(target, dtype=float)
    _, v, ann = proj.lmo_action(0, target)
    keys = [(0, ann.tobytes())]
    verts = {keys[0]: (0, v, ann)}
    weights = {keys[0]: 1.0}
    x = v.copy()
    history = [float(np.linalg.norm(x - target))]
    for _ in range(max_iters):
        grad = x - target
        dist = history[-1]
        if dist <= tol:
            break
        # unit direction: the LMO's absolute tie tolerance must not swamp a tiny gradient
        _, a, s, ann = proj.lmo(-grad / dist)
        gap = float(grad @ (x - s))
        # for a target inside the set the gap is at least dist^2 / 2, so a gap
        # far below that certifies the target lies outside and x is its projection
        if gap <= 1e-9 * dist**2:
            break
        away_key = max(weights, key=lambda k: float(grad @ verts[k][1]))
        away = verts[away_key][1]
        gap_away = float(grad @ (away - x))
        if gap >= gap_away:
            d, max_step, mode = s - x, 1.0, "fw"
        else:
            w = weights[away_key]
            d, max_step, mode = x - away, w / (1.0 - w) if w < 1.0 else np.inf, "away"
        dd = float(d @ d)
        if dd <= 0.0:
            break
        step = min(max(-float(grad @ d) / dd, 0.0), max_step)
        if step <= 0.0:
            break
        if mode == "fw":
            key = (a, ann.tobytes())
            for k in weights:
                weights[k] *= 1.0 - step
            verts.setdefault(key, (a, s, ann))
            weights[key] = weights.get(key, 0.0) + step
            if step >= 1.0:
                weights = {key: 1.0}
        else:
            for k in weights:
                weights[k] *= 1.0 + step
            weights[away_key] -= step
            if step >= max_step:
                del weights[away_key]
        total = sum(weights.values())
        weights = {k: w / total for k, w in weights.items() if w > 0.0}
        x = sum(w * verts[k][1] for k, w in weights.items())
        history.append(float(np.linalg.norm(x - target)))
    entries = [DecompEntry(verts[k][0], w, verts[k][1], verts[k][2])
               for k, w in sorted(weights.items(), key=lambda kw: (kw[0][0], kw[0][1]))]
    return Decomposition(entries, history[-1], history), x


def check_feasible(sfset, model, q, target, tol=EPS_FEAS, max_iters=MAX_FW_ITERS):
    """Decide whether ``target`` lies in ``Phi q`` (within ``tol``).

    Returns a :class:`Feasibility`; when infeasible, ``nearest`` is the
    Frank-Wolfe estimate of the closest achievable point.
    """
    proj = project_set(sfset, model, q)
    dec, x = _frank_wolfe(proj, target, tol, max_iters)
    return Feasibility(dec.residual <= tol, dec.residual, x, dec)


def decompose_target(sfset, model, q, target, tol=EPS_FW, max_iters=MAX_FW_ITERS, proj=None):
    """Write ``target`` as a convex combination of annotated vertices of ``Phi q``."""
    proj = proj or project_set(sfset, model, q)
    dec, x = _frank_wolfe(proj, target, tol, max_iters)
    if dec.residual > tol:
        raise InfeasibleTarget(f"target is {dec.residual:.3g} away from the achievable set",
                               distance=dec.residual, nearest=x)
    return dec


def _next_vertex(sfset, model, a, o, j, q_next):
    """Vertex of ``Phi q_next`` that stored point ``j`` of pair (a, o) was built from."""
    prov = provenance(sfset, model, a, o, j)
    if prov is None:
        return None
    a_star, ann = prov
    proj = project_set(sfset, model, q_next)
    return a_star, proj.vertex(a_star, ann), ann


def _continue(sfset, model, entry, o, q, prob, q_next, proj_next=None):
    """Next target and its decomposition after observing ``o``.

    Returns ``(target, decomposition, drift)`` where ``drift`` is the distance
    between the propagated target and the point actually used.
    """
    a = entry.action
    j = int(entry.annotation[o])
    X_q = sfset.cores[a][o][j] @ (model.blocks[a][o] @ q)
    propagated = X_q / prob
    nv = _next_vertex(sfset, model, a, o, j, q_next)
    if nv is not None:
        a_star, v, ann = nv
        drift = float(np.linalg.norm(v - propagated))
        if drift <= EPS_FEAS:
            return v, Decomposition([DecompEntry(a_star, 1.0, v, ann)], 0.0), drift
    proj_next = proj_next or project_set(sfset, model, q_next)
    dec, x = _frank_wolfe(proj_next, propagated, EPS_FW)
    drift = float(np.linalg.norm(x - propagated))
    if drift > 0:
        logger.info("projected target back onto the achievable set (drift %.3g)", drift)
    return x, dec, drift


def step_match(sfset, model, state: MatchState, decomposition: Decomposition, rng,
               env_observation=None):
    """One step of the matching policy.

    Samples a vertex by weight, plays its action, observes (from
    ``env_observation(a)`` if given, else by sampling the model) and
    returns ``(action, next_state, next_decomposition, info)``.
    """
    w = decomposition.weights
    i = int(rng.choice(len(w), p=w / w.sum()))
    entry = decomposition.entries[i]
    a = entry.action
    if env_observation is None:
        o = int(rng.choice(model.num_observations, p=observation_probs(model, state.q, a)))
    else:
        o = int(env_observation(a))
    q_next, prob = psr_update(model, state.q, a, o)
    target, dec, drift = _continue(sfset, model, entry, o, state.q, prob, q_next)
    info = {"observation": o, "drift": drift, "feature": model.F[a] @ state.q}
    return a, MatchState(q_next, target, state.t + 1), dec, info


def _feature_bound(model):
    """Largest one-step feature norm at a basis state."""
    return float(np.linalg.norm(model.F, axis=1).max())


def truncation_horizon(model, tail_tol=1e-8):
    """Smallest H with ``gamma^H max|f| / (1 - gamma) <= tail_tol``."""
    if model.gamma == 0.0:
        return 1
    fmax = _feature_bound(model) or 1.0
    H = math.log(tail_tol * (1.0 - model.gamma) / fmax) / math.log(model.gamma)
    return max(1, int(math.ceil(H)))


@dataclass
class RolloutResult:
    mean: np.ndarray
    std: np.ndarray
    features: np.ndarray
    horizon: int
    truncation_bound: float
    max_drift: float
    max_post_projection: float
    drift_log: list

    @property
    def standard_error(self):
        return self.std / math.sqrt(len(self.features))


class _Node:
    __slots__ = ("q", "dec", "feats", "obs", "children")

    def __init__(self, model, q, dec):
        self.q = q
        self.dec = dec
        self.feats = np.array([model.F[e.action] @ q for e in dec.entries])
        self.obs = [observation_probs(model, q, e.action) for e in dec.entries]
        self.children = {}


def rollout_match(sfset, model, target, horizon=None, num_rollouts=1000, seed=0,
                  q1=None, tail_tol=1e-8):
    """Run the matching policy in the simulated model.

    All rollouts advance in lockstep; rollouts in the same (state, target)
    situation share one decomposition. Returns a :class:`RolloutResult` with
    per-rollout discounted features truncated at ``horizon`` (default: the
    first horizon whose discounted tail is below ``tail_tol``).
    """
    rng = np.random.default_rng(seed)
    q = np.array(model.q1 if q1 is None else q1, dtype=float)
    target = np.asarray(target, dtype=float)
    proj = project_set(sfset, model, q)
    feas = check_feasible(sfset, model, q, target)
    if not feas.feasible:
        raise InfeasibleTarget(f"target is {feas.distance:.3g} away from the achievable set",
                               distance=feas.distance, nearest=feas.nearest)
    dec, x = _frank_wolfe(proj, target, EPS_FW)
    drift_log = [(0, float(np.linalg.norm(x - target)))]
    horizon = horizon or truncation_horizon(model, tail_tol)
    fmax = _feature_bound(model)
    nodes = [_Node(model, q, dec)]
    at = np.zeros(num_rollouts, dtype=np.int64)
    feats = np.zeros((num_rollouts, model.d))
    post = 0.0
    disc = 1.0
    O = model.num_observations
    for t in range(horizon):
        nxt = np.empty_like(at)
        for nid in np.unique(at):
            idx = np.flatnonzero(at == nid)
            node = nodes[nid]
            w = node.dec.weights
            picks = rng.choice(len(w), size=len(idx), p=w / w.sum()) if len(w) > 1 \
                else np.zeros(len(idx), dtype=np.int64)
            for i in np.unique(picks):
                sub = idx[picks == i]
                feats[sub] += disc * node.feats[i]
                if t + 1 == horizon:
                    continue
                obs = rng.choice(O, size=len(sub), p=node.obs[i])
                for o in np.unique(obs):
                    key = (int(i), int(o))
                    if key not in node.children:
                        entry = node.dec.entries[i]
                        q_next, prob = psr_update(model, node.q, entry.action, int(o))
                        tgt, dec2, drift = _continue(sfset, model, entry, int(o), node.q,
                                                     prob, q_next)
                        drift_log.append((t + 1, drift))
                        post = max(post, dec2.residual)
                        nodes.append(_Node(model, q_next, dec2))
                        node.children[key] = len(nodes) - 1
                    nxt[sub[obs == o]] = node.children[key]
        at = nxt
        disc *= model.gamma
    bound = (model.gamma**horizon) * fmax / (1.0 - model.gamma)
    return RolloutResult(mean=feats.mean(axis=0), std=feats.std(axis=0, ddof=1)
                         if num_rollouts > 1 else np.zeros(model.d),
                         features=feats, horizon=horizon, truncation_bound=bound,
                         max_drift=max(d for _, d in drift_log),
                         max_post_projection=post, drift_log=drift_log)
