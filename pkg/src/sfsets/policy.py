"""Deterministic policy trees, mixtures of trees and their successor matrices."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegenerateMixture, EnumerationTooLarge
from .model import observation_probs, psr_update

DEFAULT_TREE_CAP = 10**6


@dataclass(frozen=True, eq=False)
class PolicyTree:
    """Balanced tree: take ``action``, then follow ``children[o]`` after observing ``o``.

    Leaves have no children. Subtrees are shared freely; trees are immutable.
    """

    action: int
    children: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "action", int(self.action))
        object.__setattr__(self, "children", tuple(self.children))
        if self.children:
            depth = self.children[0].depth
            if any(c.depth != depth for c in self.children):
                raise ValueError("policy trees must be balanced")

    @cached_property
    def depth(self):
        return 1 + (self.children[0].depth if self.children else 0)

    def child(self, o):
        return self.children[o]

    def to_dict(self):
        return {"a": self.action, "children": [c.to_dict() for c in self.children]}

    @classmethod
    def from_dict(cls, data):
        return cls(data["a"], tuple(cls.from_dict(c) for c in data.get("children", ())))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def key(self):
        """Hashable structural key (for equality checks in tests)."""
        return (self.action, tuple(c.key() for c in self.children))


def check_tree(tree, num_actions, num_observations):
    stack = [tree]
    while stack:
        t = stack.pop()
        if not 0 <= t.action < num_actions:
            raise ValueError(f"action {t.action} out of range")
        if t.children and len(t.children) != num_observations:
            raise ValueError("internal nodes need one child per observation")
        stack.extend(t.children)


@dataclass(frozen=True, eq=False)
class PolicyMixture:
    trees: tuple
    weights: np.ndarray

    def __post_init__(self):
        trees = tuple(self.trees)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not trees or len(trees) != w.size:
            raise ValueError("need one weight per tree")
        if w.min() < 0 or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if len({t.depth for t in trees}) != 1:
            raise ValueError("all trees in a mixture must share a depth")
        w.setflags(write=False)
        object.__setattr__(self, "trees", trees)
        object.__setattr__(self, "weights", w)

    @property
    def depth(self):
        return self.trees[0].depth

    def action_probs(self, num_actions):
        p = np.zeros(num_actions)
        for t, w in zip(self.trees, self.weights):
            p[t.action] += w
        return p

    def condition(self, a, o):
        """The mixture pi(a, o): keep trees rooted at ``a``, renormalize, descend."""
        keep = [(t, w) for t, w in zip(self.trees, self.weights) if t.action == a]
        total = sum(w for _, w in keep)
        if not keep or total <= 0:
            raise DegenerateMixture(f"no weight on trees rooted at action {a}")
        if not keep[0][0].children:
            raise ValueError("cannot descend below the leaves")
        return PolicyMixture(tuple(t.children[o] for t, _ in keep),
                             np.array([w for _, w in keep]) / total)


def successor_matrix(model, tree, tail=None):
    """Successor feature matrix ``A^pi`` of a deterministic tree.

    Uses ``A^pi = F_a + gamma * sum_o A^{pi(o)} T_ao``. Below the leaves the
    continuation is ``tail`` (a ``d x k`` matrix, default zero), so a tree of
    depth H gives the horizon-H matrix and ``tree=None`` gives ``tail``
    itself (the zero matrix at horizon 0).
    """
    d, k = model.d, model.k
    if tail is None:
        tail = np.zeros((d, k))
    if tree is None:
        return np.array(tail, dtype=float)
    gamma = model.gamma
    O = model.num_observations
    memo = {}
    leaf = {}

    def backed_up(a, child_of):
        acc = np.zeros((d, k))
        for o in range(O):
            rows = model.rows[a][o]
            if rows.size:
                acc += child_of(o)[:, rows] @ model.blocks[a][o]
        return model.F[a] + gamma * acc

    def solve(t):
        if id(t) not in memo:
            if t.children:
                memo[id(t)] = backed_up(t.action, lambda o: solve(t.children[o]))
            else:
                if t.action not in leaf:
                    leaf[t.action] = backed_up(t.action, lambda o: tail)
                memo[id(t)] = leaf[t.action]
        return memo[id(t)]

    return solve(tree)


def successor_matrix_mixture(model, mix: PolicyMixture, tail=None):
    return sum(w * successor_matrix(model, t, tail) for t, w in zip(mix.trees, mix.weights))


def constant_action_matrix(model, a):
    """Infinite-horizon successor matrix of the policy that always plays ``a``.

    Solves ``A (I - gamma T_a) = F_a``.
    """
    M = np.eye(model.k) - model.gamma * model.action_operator(a)
    return np.linalg.solve(M.T, model.F[a].T).T


def execute_mixture_step(mix: PolicyMixture, num_actions, rng):
    """Sample the next action of a mixture.

    Returns ``(action, condition)`` where ``condition(o)`` gives the mixture to
    follow after observing ``o``.
    """
    p = mix.action_probs(num_actions)
    a = int(rng.choice(num_actions, p=p))

    def condition(o):
        return mix.condition(a, o)

    return a, condition


def num_trees(A, O, H):
    if H <= 0:
        return 1
    nodes = H if O == 1 else (O**H - 1) // (O - 1)
    return A**nodes


def enumerate_trees(A, O, H, cap=DEFAULT_TREE_CAP):
    """Yield every balanced depth-H deterministic tree once.

    Order is lexicographic in (root action, children tuple). Subtrees are
    shared between the yielded trees.
    """
    if H < 1:
        raise ValueError("trees have depth at least 1")
    count = num_trees(A, O, H)
    if count > cap:
        raise EnumerationTooLarge(f"{A} actions, {O} observations, depth {H}: "
                                  f"{count} trees exceeds the cap of {cap}")
    level = [PolicyTree(a) for a in range(A)]
    for _ in range(H - 1):
        level = [PolicyTree(a, children)
                 for a in range(A)
                 for children in itertools.product(level, repeat=O)]
    yield from level


def random_tree(A, O, H, rng):
    """Uniformly random depth-H tree (each node's action drawn independently)."""
    if H == 1:
        return PolicyTree(int(rng.integers(A)))
    return PolicyTree(int(rng.integers(A)), tuple(random_tree(A, O, H - 1, rng) for _ in range(O)))


def rollout_features(model, policy, num_rollouts, seed=0, horizon=None, q1=None,
                     tail_action=None):
    """Monte-Carlo discounted features of a tree or mixture.

    Mixtures are executed lazily by filter-and-renormalize. Beyond the tree's
    depth the rollout continues with ``tail_action`` (if given) up to
    ``horizon`` steps. Returns an ``(num_rollouts, d)`` array.
    """
    rng = np.random.default_rng(seed)
    if isinstance(policy, PolicyTree):
        policy = PolicyMixture((policy,), np.ones(1))
    horizon = policy.depth if horizon is None else horizon
    start = model.q1 if q1 is None else np.asarray(q1, dtype=float)
    out = np.zeros((num_rollouts, model.d))
    A, O = model.num_actions, model.num_observations
    for n in range(num_rollouts):
        q = np.array(start, dtype=float)
        mix = policy
        disc = 1.0
        for t in range(horizon):
            if mix is not None:
                a, cond = execute_mixture_step(mix, A, rng)
            elif tail_action is not None:
                a, cond = tail_action, None
            else:
                break
            out[n] += disc * (model.F[a] @ q)
            p = observation_probs(model, q, a)
            o = int(rng.choice(O, p=p))
            q, _ = psr_update(model, q, a, o)
            if cond is not None:
                mix = cond(o) if t + 1 < policy.depth else None
            disc *= model.gamma
    return out
