"""Optimal values, actions and alpha vectors for linear rewards ``R(q, a) = r . f(q, a)``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dp import DirectionSet, extreme_points, project_set


@dataclass(frozen=True)
class RewardSpec:
    r: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise ValueError("reward coefficients must be finite")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


def _r(reward):
    return reward.r if isinstance(reward, RewardSpec) else np.asarray(reward, dtype=float)


def plan(sfset, model, reward, q):
    """``(value, action)`` from the linear-maximization oracle over ``Phi q``."""
    val, a, _, _ = project_set(sfset, model, q).lmo(_r(reward))
    return val, a


def optimal_value(sfset, model, reward, q):
    return plan(sfset, model, reward, q)[0]


def optimal_action(sfset, model, reward, q):
    return plan(sfset, model, reward, q)[1]


def optimal_values(sfset, model, reward, states):
    return np.array([optimal_value(sfset, model, reward, q) for q in np.atleast_2d(states)])


def alpha_vectors(sfset, model, reward, states=None):
    """Alpha vectors ``psi^T r`` of the set's extreme points.

    One vector per stored direction (the maximizer of ``<m_i, psi>`` over the
    backed-up set) plus, for every state in ``states``, the maximizer of
    ``r^T psi q``. Their pointwise maximum is a convex piecewise-linear lower
    bound on the value function, tight at the given states.
    """
    r = _r(reward)
    M = sfset.directions.matrices
    if states is not None:
        S = np.atleast_2d(np.asarray(states, dtype=float))
        M = np.concatenate([M, np.einsum("d,sk->sdk", r, S)])
        M = M[np.einsum("ndk,ndk->n", M, M) > 0]
    psi, _, _ = extreme_points(model, sfset, M)
    return np.einsum("ndk,d->nk", psi, r)


def pbvi_directions(reward, sampled_states):
    """Rank-one directions ``r q_i^T`` (Frobenius-normalized)."""
    r = _r(reward)
    S = np.atleast_2d(np.asarray(sampled_states, dtype=float))
    if not len(S) or not np.any(r):
        raise ValueError("need a nonzero reward and at least one state")
    return DirectionSet(np.einsum("d,sk->sdk", r, S))
