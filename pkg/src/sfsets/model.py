"""Unified PSR model, MDP/POMDP embeddings, state updates and tests.

Every algorithm in the package consumes a :class:`PsrModel`. MDPs and POMDPs
are embedded into it with :func:`mdp_to_psr` and :func:`pomdp_to_psr`.

Transition operators are kept in row-factored form: for each (action,
observation) pair we store the indices of the nonzero rows of ``T_ao`` and
the dense values of those rows. For an MDP embedding every ``T_ao`` has a
single nonzero row, so this costs O(A k^2) memory instead of O(A k^3).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, SingularCoreTests, ZeroProbabilityObservation

logger = logging.getLogger(__name__)

EPS_PROB = 1e-9
CORE_TEST_RCOND = 1e-8


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PsrModel:
    """A (transformed) predictive state representation with linear features.

    Parameters
    ----------
    q1 : (k,) array
        Initial state vector.
    u : (k,) array
        Normalization vector; ``u @ q`` is 1 for every valid state.
    F : (A, d, k) array
        Feature matrices, ``f(q, a) = F[a] @ q``.
    rows, blocks : nested tuples indexed ``[a][o]``
        Row-factored transition operators. ``T_ao`` is zero except on
        ``rows[a][o]``, where it equals ``blocks[a][o]`` (shape ``(r, k)``).
    gamma : float
        Discount in [0, 1).

    Use :meth:`from_dense` to build a model from a full ``(A, O, k, k)``
    transition array.
    """

    q1: np.ndarray
    u: np.ndarray
    F: np.ndarray
    rows: tuple
    blocks: tuple
    gamma: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        q1 = _frozen(self.q1)
        u = _frozen(self.u)
        F = _frozen(self.F)
        if F.ndim != 3:
            raise DimensionMismatch(f"F must be (A, d, k), got shape {F.shape}")
        A, _, k = F.shape
        if q1.shape != (k,) or u.shape != (k,):
            raise DimensionMismatch(f"q1 and u must have length k={k}")
        if len(self.rows) != A or len(self.blocks) != A:
            raise DimensionMismatch("transition operators must be given for every action")
        O = len(self.rows[0])
        rows, blocks = [], []
        for a in range(A):
            if len(self.rows[a]) != O or len(self.blocks[a]) != O:
                raise DimensionMismatch("every action needs the same number of observations")
            ra, ba = [], []
            for o in range(O):
                r = _frozen(np.asarray(self.rows[a][o]).reshape(-1), dtype=np.int64)
                b = _frozen(np.asarray(self.blocks[a][o], dtype=float).reshape(len(r), k))
                if b.shape[1] != k:
                    raise DimensionMismatch(f"T[{a}][{o}] rows must have length k={k}")
                if r.size and (r.min() < 0 or r.max() >= k):
                    raise DimensionMismatch(f"T[{a}][{o}] row index out of range")
                ra.append(r)
                ba.append(b)
            rows.append(tuple(ra))
            blocks.append(tuple(ba))
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        object.__setattr__(self, "q1", q1)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "rows", tuple(rows))
        object.__setattr__(self, "blocks", tuple(blocks))
        object.__setattr__(self, "gamma", float(self.gamma))

    @classmethod
    def from_dense(cls, q1, u, T, F, gamma, meta=None):
        """Build a model from a dense ``(A, O, k, k)`` array of operators."""
        T = np.asarray(T, dtype=float)
        if T.ndim != 4 or T.shape[2] != T.shape[3]:
            raise DimensionMismatch(f"T must be (A, O, k, k), got shape {T.shape}")
        rows = []
        blocks = []
        for a in range(T.shape[0]):
            ra, ba = [], []
            for o in range(T.shape[1]):
                nz = np.flatnonzero(np.any(T[a, o] != 0.0, axis=1))
                ra.append(nz)
                ba.append(T[a, o][nz])
            rows.append(tuple(ra))
            blocks.append(tuple(ba))
        return cls(q1=q1, u=u, F=F, rows=tuple(rows), blocks=tuple(blocks),
                   gamma=gamma, meta=dict(meta or {}))

    @property
    def k(self):
        return self.F.shape[2]

    @property
    def d(self):
        return self.F.shape[1]

    @property
    def num_actions(self):
        return self.F.shape[0]

    @property
    def num_observations(self):
        return len(self.rows[0])

    def T(self, a, o):
        """Dense ``k x k`` operator ``T_ao``."""
        out = np.zeros((self.k, self.k))
        out[self.rows[a][o]] = self.blocks[a][o]
        return out

    def dense_T(self):
        """All operators as one ``(A, O, k, k)`` array (memory heavy for big k)."""
        return np.stack([np.stack([self.T(a, o) for o in range(self.num_observations)])
                         for a in range(self.num_actions)])

    def apply(self, a, o, q):
        """Return ``T_ao @ q`` without materializing ``T_ao``."""
        out = np.zeros(self.k)
        out[self.rows[a][o]] = self.blocks[a][o] @ q
        return out

    def action_operator(self, a):
        """``T_a = sum_o T_ao``."""
        out = np.zeros((self.k, self.k))
        for o in range(self.num_observations):
            out[self.rows[a][o]] += self.blocks[a][o]
        return out

    @cached_property
    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.q1, self.u, self.F, np.array([self.gamma])):
            h.update(np.ascontiguousarray(arr).tobytes())
        for a in range(self.num_actions):
            for o in range(self.num_observations):
                h.update(self.rows[a][o].tobytes())
                h.update(np.ascontiguousarray(self.blocks[a][o]).tobytes())
        return h.hexdigest()[:16]

    @cached_property
    def column_support(self):
        """Boolean ``(A, O, k)``: column ``j`` of ``T_ao`` has a nonzero entry."""
        out = np.zeros((self.num_actions, self.num_observations, self.k), dtype=bool)
        for a in range(self.num_actions):
            for o in range(self.num_observations):
                out[a, o] = np.any(self.blocks[a][o] != 0.0, axis=0)
        return out


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Tabular MDP.

    ``transitions[a][i, j]`` is P(s'=i | s=j, a) (columns sum to one) and
    ``features[s, a]`` is the one-step feature vector f(s, a).
    """

    transitions: np.ndarray  # (A, k, k)
    features: np.ndarray  # (k, A, d)
    b1: np.ndarray
    gamma: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        T = _frozen(self.transitions)
        f = _frozen(self.features)
        b1 = _frozen(self.b1)
        if T.ndim != 3 or T.shape[1] != T.shape[2]:
            raise DimensionMismatch(f"transitions must be (A, k, k), got {T.shape}")
        A, k, _ = T.shape
        if f.ndim != 3 or f.shape[:2] != (k, A):
            raise DimensionMismatch(f"features must be (k, A, d) = ({k}, {A}, d), got {f.shape}")
        if b1.shape != (k,):
            raise DimensionMismatch("b1 must have length k")
        if not np.allclose(T.sum(axis=1), 1.0, atol=1e-9) or T.min() < 0:
            raise ValueError("transition matrices must be column-stochastic")
        object.__setattr__(self, "transitions", T)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "b1", b1)

    @property
    def k(self):
        return self.transitions.shape[1]

    @property
    def num_actions(self):
        return self.transitions.shape[0]

    @property
    def d(self):
        return self.features.shape[2]


@dataclass(frozen=True, eq=False)
class PomdpSpec(MdpSpec):
    """Tabular POMDP; ``observation_matrix[o, s]`` is P(o | s' = s)."""

    observation_matrix: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        D = _frozen(self.observation_matrix)
        if D.ndim != 2 or D.shape[1] != self.k:
            raise DimensionMismatch(f"observation matrix must be (O, k), got {D.shape}")
        if not np.allclose(D.sum(axis=0), 1.0, atol=1e-9) or D.min() < 0:
            raise ValueError("observation matrix columns must sum to one")
        object.__setattr__(self, "observation_matrix", D)


@dataclass(frozen=True)
class SimpleTest:
    """An action sequence paired with the observation sequence it must produce."""

    actions: tuple
    observations: tuple

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "observations", tuple(int(o) for o in self.observations))
        if len(self.actions) != len(self.observations):
            raise ValueError("a simple test needs one observation per action")

    def __len__(self):
        return len(self.actions)

    def extend(self, a, o):
        """One-step extension: prepend ``(a, o)``."""
        return SimpleTest((a,) + self.actions, (o,) + self.observations)


def _features_matrix(features):
    # (k, A, d) table -> (A, d, k)
    return np.transpose(np.asarray(features, dtype=float), (1, 2, 0))


def mdp_to_psr(spec: MdpSpec) -> PsrModel:
    """Embed an MDP; observations are the next states, so O = k."""
    T = spec.transitions
    A, k, _ = T.shape
    rows = tuple(tuple(np.array([o]) for o in range(k)) for _ in range(A))
    blocks = tuple(tuple(T[a][o:o + 1, :] for o in range(k)) for a in range(A))
    return PsrModel(q1=spec.b1, u=np.ones(k), F=_features_matrix(spec.features),
                    rows=rows, blocks=blocks, gamma=spec.gamma,
                    meta={"kind": "mdp", **spec.meta})


def pomdp_to_psr(spec: PomdpSpec) -> PsrModel:
    """Embed a POMDP with ``T_ao = diag(D[o]) T_a``."""
    T = spec.transitions
    D = spec.observation_matrix
    rows, blocks = [], []
    for a in range(T.shape[0]):
        ra, ba = [], []
        for o in range(D.shape[0]):
            Tao = D[o][:, None] * T[a]
            nz = np.flatnonzero(np.any(Tao != 0.0, axis=1))
            ra.append(nz)
            ba.append(Tao[nz])
        rows.append(tuple(ra))
        blocks.append(tuple(ba))
    return PsrModel(q1=spec.b1, u=np.ones(spec.k), F=_features_matrix(spec.features),
                    rows=tuple(rows), blocks=tuple(blocks), gamma=spec.gamma,
                    meta={"kind": "pomdp", **spec.meta})


def psr_update(model, q, a, o):
    """Condition on taking ``a`` and seeing ``o``; returns ``(q_next, prob)``."""
    unnorm = model.apply(a, o, np.asarray(q, dtype=float))
    p = float(model.u @ unnorm)
    if p <= EPS_PROB:
        raise ZeroProbabilityObservation(
            f"P(o={o} | q, do a={a}) = {p:.3g} is not positive")
    q_next = unnorm / p
    # renormalize to keep long rollouts from drifting off the u-normalized plane
    q_next /= model.u @ q_next
    return q_next, p


def observation_probs(model, q, a):
    """Vector of P(o | q, do a) over observations, clamped at zero."""
    q = np.asarray(q, dtype=float)
    u = model.u
    p = np.array([u[model.rows[a][o]] @ (model.blocks[a][o] @ q)
                  for o in range(model.num_observations)])
    p = np.maximum(p, 0.0)
    total = p.sum()
    if abs(total - 1.0) > EPS_PROB:
        logger.warning("observation probabilities sum to %.12g; renormalizing", total)
        if total > 0:
            p = p / total
    return p


def feature_vector(model, q, a):
    return model.F[a] @ np.asarray(q, dtype=float)


def prediction_vector(model, test: SimpleTest):
    """Row vector ``m`` with ``test_value(model, q, test) == m @ q``."""
    m = np.array(model.u, dtype=float)
    for a, o in zip(reversed(test.actions), reversed(test.observations)):
        m = m[model.rows[a][o]] @ model.blocks[a][o]
    return m


def test_value(model, q, test: SimpleTest):
    """Success probability ``u^T T_{a_l o_l} ... T_{a_1 o_1} q``."""
    v = np.asarray(q, dtype=float)
    for a, o in zip(test.actions, test.observations):
        v = model.apply(a, o, v)
    return float(model.u @ v)


# pytest would otherwise try to collect the function above when imported into a test module
test_value.__test__ = False


def core_test_matrix(model, tests):
    """Stack the prediction vectors of ``tests`` as rows."""
    tests = list(tests)
    if len(tests) != model.k:
        raise DimensionMismatch(f"need exactly k={model.k} core tests, got {len(tests)}")
    return np.stack([prediction_vector(model, t) for t in tests])


def similarity_transform(model, S):
    """Change of state coordinates ``q' = S q``.

    Raises :class:`SingularCoreTests` if ``S`` is numerically singular.
    """
    S = np.asarray(S, dtype=float)
    U, s, Vt = np.linalg.svd(S)
    if s[-1] < CORE_TEST_RCOND * s[0]:
        raise SingularCoreTests(
            f"core tests are linearly dependent (sigma_min/sigma_max = {s[-1] / s[0]:.3g})")
    S_inv = (Vt.T / s) @ U.T
    A, O = model.num_actions, model.num_observations
    T = np.empty((A, O, model.k, model.k))
    for a in range(A):
        for o in range(O):
            T[a, o] = S @ model.T(a, o) @ S_inv
    F = np.einsum("adk,kj->adj", model.F, S_inv)
    return PsrModel.from_dense(q1=S @ model.q1, u=S_inv.T @ model.u, T=T, F=F,
                               gamma=model.gamma, meta={**model.meta, "kind": "psr"})


def transform_via_core_tests(model, tests):
    """Re-express ``model`` so that each state coordinate is a core-test value."""
    return similarity_transform(model, core_test_matrix(model, tests))


@dataclass
class ValidationReport:
    max_negativity: float
    max_sum_deviation: float
    num_checks: int
    tol: float = EPS_PROB

    @property
    def passed(self):
        return self.max_negativity <= self.tol and self.max_sum_deviation <= self.tol


def validate_model(model, num_trajectories=20, horizon=20, seed=0, tol=EPS_PROB):
    """Check observation probabilities along random-action trajectories."""
    rng = np.random.default_rng(seed)
    worst_neg = 0.0
    worst_sum = 0.0
    checks = 0
    u = model.u
    for _ in range(num_trajectories):
        q = np.array(model.q1, dtype=float)
        worst_sum = max(worst_sum, abs(float(u @ q) - 1.0))
        for _ in range(horizon):
            raw = np.empty((model.num_actions, model.num_observations))
            for a in range(model.num_actions):
                for o in range(model.num_observations):
                    raw[a, o] = u[model.rows[a][o]] @ (model.blocks[a][o] @ q)
            checks += raw.size
            worst_neg = max(worst_neg, float(-raw.min()))
            worst_sum = max(worst_sum, float(np.abs(raw.sum(axis=1) - 1.0).max()))
            a = int(rng.integers(model.num_actions))
            p = np.maximum(raw[a], 0.0)
            if p.sum() <= 0:
                break
            o = int(rng.choice(model.num_observations, p=p / p.sum()))
            if raw[a, o] <= EPS_PROB:
                break
            q = model.apply(a, o, q) / raw[a, o]
    return ValidationReport(worst_neg, worst_sum, checks, tol)


def sample_reachable_states(model, n, horizon=10, seed=0):
    """Draw ``n`` states reached by random-action rollouts of random length."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        q = np.array(model.q1, dtype=float)
        steps = int(rng.integers(0, horizon + 1))
        for _ in range(steps):
            a = int(rng.integers(model.num_actions))
            p = observation_probs(model, q, a)
            o = int(rng.choice(model.num_observations, p=p))
            q, _ = psr_update(model, q, a, o)
        out.append(q)
    return out


def mdp_from_psr(model):
    """Recover an :class:`MdpSpec` if ``model`` has the MDP-embedding structure.

    Returns ``None`` when the model is not an MDP embedding.
    """
    k, A, O = model.k, model.num_actions, model.num_observations
    if O != k or not np.array_equal(model.u, np.ones(k)):
        return None
    T = np.zeros((A, k, k))
    for a in range(A):
        for o in range(O):
            r = model.rows[a][o]
            if r.size > 1 or (r.size == 1 and r[0] != o):
                return None
            if r.size:
                T[a, o] = model.blocks[a][o][0]
    if T.min() < 0 or not np.allclose(T.sum(axis=1), 1.0, atol=1e-9):
        return None
    features = np.transpose(model.F, (2, 0, 1))
    q1 = model.q1 if np.all(model.q1 >= 0) else np.eye(k)[0]
    return MdpSpec(transitions=T, features=features, b1=q1, gamma=model.gamma,
                   meta=dict(model.meta))


# ---------------------------------------------------------------- JSON files

def _row_entry(rows, block, k, dense):
    if dense:
        full = np.zeros((k, k))
        full[rows] = block
        return full.tolist()
    return {"rows": rows.tolist(), "values": block.tolist()}


def model_to_dict(model, dense=None):
    """JSON-ready dict. Operators are dense ``k x k`` row-major unless ``dense``
    is False, in which case each is written as ``{"rows", "values"}``."""
    if dense is None:
        dense = model.k <= 32
    k = model.k
    return {
        "k": k,
        "num_actions": model.num_actions,
        "num_observations": model.num_observations,
        "gamma": model.gamma,
        "q1": model.q1.tolist(),
        "u": model.u.tolist(),
        "T": [[_row_entry(model.rows[a][o], model.blocks[a][o], k, dense)
               for o in range(model.num_observations)]
              for a in range(model.num_actions)],
        "F": model.F.tolist(),
        "meta": _jsonable(model.meta),
    }


def _jsonable(meta):
    return json.loads(json.dumps(meta, default=lambda x: np.asarray(x).tolist()))


def model_from_dict(data):
    k = int(data["k"])
    A = int(data["num_actions"])
    O = int(data["num_observations"])
    rows, blocks = [], []
    for a in range(A):
        ra, ba = [], []
        for o in range(O):
            entry = data["T"][a][o]
            if isinstance(entry, dict):
                r = np.asarray(entry["rows"], dtype=np.int64)
                b = np.asarray(entry["values"], dtype=float).reshape(len(r), k)
            else:
                full = np.asarray(entry, dtype=float).reshape(k, k)
                r = np.flatnonzero(np.any(full != 0.0, axis=1))
                b = full[r]
            ra.append(r)
            ba.append(b)
        rows.append(tuple(ra))
        blocks.append(tuple(ba))
    F = np.asarray(data["F"], dtype=float).reshape(A, -1, k)
    return PsrModel(q1=data["q1"], u=data["u"], F=F, rows=tuple(rows), blocks=tuple(blocks),
                    gamma=float(data["gamma"]), meta=data.get("meta", {}))


def save_model(model, path, dense=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, dense=dense), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def spec_to_dict(spec):
    """JSON-ready dict for an MDP or POMDP spec."""
    out = {
        "transitions": spec.transitions.tolist(),
        "features": spec.features.tolist(),
        "b1": spec.b1.tolist(),
        "gamma": spec.gamma,
        "meta": _jsonable(spec.meta),
    }
    if isinstance(spec, PomdpSpec):
        out["observation_matrix"] = spec.observation_matrix.tolist()
    return out


def spec_from_dict(data):
    kw = dict(transitions=data["transitions"], features=data["features"], b1=data["b1"],
              gamma=float(data["gamma"]), meta=data.get("meta", {}))
    if "observation_matrix" in data:
        return PomdpSpec(observation_matrix=data["observation_matrix"], **kw)
    return MdpSpec(**kw)
