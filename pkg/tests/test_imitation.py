import numpy as np
import pytest

from conftest import random_mdp
from sfsets.dp import BackupConfig, project_set, run_dp, sample_directions
from sfsets.errors import InfeasibleTarget
from sfsets.imitation import (EPS_FEAS, MatchState, check_feasible, decompose_target,
                              rollout_match, step_match, truncation_horizon)
from sfsets.model import MdpSpec, mdp_to_psr
from sfsets.policy import constant_action_matrix, random_tree, successor_matrix

UP, DOWN, LEFT, RIGHT = range(4)
BOTTOM_LEFT = np.eye(9)[0]


def policy_target(model, seed, H=6):
    rng = np.random.default_rng(seed)
    tree = random_tree(model.num_actions, model.num_observations, H, rng)
    tail = constant_action_matrix(model, int(rng.integers(model.num_actions)))
    return successor_matrix(model, tree, tail) @ model.q1


def test_policy_targets_are_feasible(grid3, grid3_set):
    for seed in range(3):
        res = check_feasible(grid3_set, grid3, grid3.q1, policy_target(grid3, seed))
        assert res.feasible and res.distance <= EPS_FEAS


def test_outward_offset_is_infeasible(grid3, grid3_set):
    proj = project_set(grid3_set, grid3, grid3.q1)
    g = np.array([0.6, 0.8])
    _, _, vertex, _ = proj.lmo(g)
    res = check_feasible(grid3_set, grid3, grid3.q1, vertex + 0.1 * g)
    assert not res.feasible
    assert res.distance == pytest.approx(0.1, abs=1e-6)
    with pytest.raises(InfeasibleTarget) as err:
        decompose_target(grid3_set, grid3, grid3.q1, vertex + 0.1 * g)
    assert err.value.distance == pytest.approx(0.1, abs=1e-6)


def test_zero_target_with_zero_features():
    spec = random_mdp(0, gamma=0.0)
    f = np.array(spec.features)
    f[:, 1] = 0.0
    m = mdp_to_psr(MdpSpec(transitions=spec.transitions, features=f, b1=spec.b1, gamma=0.0))
    s, _ = run_dp(m, BackupConfig(), sample_directions(0, 10, m.d, m.k))
    assert check_feasible(s, m, m.q1, np.zeros(2)).feasible


def test_vertex_target_single_entry(grid3, grid3_set):
    proj = project_set(grid3_set, grid3, BOTTOM_LEFT)
    _, a, vertex, _ = proj.lmo(np.array([-0.3, 1.0]))
    dec = decompose_target(grid3_set, grid3, BOTTOM_LEFT, vertex)
    assert len(dec.entries) == 1
    assert dec.entries[0].weight == 1.0 and dec.entries[0].action == a


def test_fig2_mixes_up_and_right(grid3, grid3_set):
    proj = project_set(grid3_set, grid3, BOTTOM_LEFT)
    g = np.array([1.0, 1.0])
    up, right = proj.lmo_action(UP, g)[1], proj.lmo_action(RIGHT, g)[1]
    target = 0.5 * (up + right)
    dec = decompose_target(grid3_set, grid3, BOTTOM_LEFT, target)
    actions = {e.action for e in dec.entries if e.weight > 1e-6}
    assert actions == {UP, RIGHT}
    np.testing.assert_allclose(dec.mean(), target, atol=1e-7)
    assert dec.weights.sum() == pytest.approx(1.0)


def test_second_step_targets_are_achievable(grid3, grid3_set):
    proj = project_set(grid3_set, grid3, BOTTOM_LEFT)
    g = np.array([1.0, 1.0])
    target = 0.5 * (proj.lmo_action(UP, g)[1] + proj.lmo_action(RIGHT, g)[1])
    dec = decompose_target(grid3_set, grid3, BOTTOM_LEFT, target)
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(20):
        a, nxt, dec2, info = step_match(grid3_set, grid3, MatchState(BOTTOM_LEFT, target),
                                        dec, rng)
        seen.add(a)
        assert info["drift"] <= EPS_FEAS
        # up lands in the middle-left cell, right in the bottom-center cell
        assert np.argmax(nxt.q) == {UP: 3, RIGHT: 1}[a]
        assert check_feasible(grid3_set, grid3, nxt.q, nxt.target).feasible
        # the continuation is a vertex, so no new decomposition is needed
        assert len(dec2.entries) == 1 and dec2.entries[0].weight == 1.0
        # the next target continues the current one: f + gamma * next = chosen vertex
        entry = [e for e in dec.entries if e.action == a]
        assert any(np.allclose(e.vertex, grid3.F[a] @ BOTTOM_LEFT + 0.9 * nxt.target,
                               atol=1e-6) for e in entry)
    assert seen == {UP, RIGHT}


def test_one_action_chain_target_update():
    T = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    f = np.array([[[1.0, 0.0]], [[0.0, 2.0]]])
    m = mdp_to_psr(MdpSpec(transitions=T, features=f, b1=np.eye(2)[0], gamma=0.5))
    s, _ = run_dp(m, BackupConfig(convergence_tol=0.0, max_iters=80),
                  sample_directions(0, 4, m.d, m.k))
    q = np.eye(2)[0]
    target = check_feasible(s, m, q, project_set(s, m, q).lmo(np.ones(2))[2]).nearest
    dec = decompose_target(s, m, q, target)
    state = MatchState(q, target)
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, nxt, dec, _ = step_match(s, m, state, dec, rng)
        np.testing.assert_allclose(nxt.target, (state.target - m.F[a] @ state.q) / 0.5,
                                   atol=1e-9)
        state = nxt


def test_expected_continuation_is_exact(pomdp2):
    s, _ = run_dp(pomdp2, BackupConfig(convergence_tol=1e-12),
                  sample_directions(0, 12, pomdp2.d, pomdp2.k))
    q = np.array([0.35, 0.65])
    proj = project_set(s, pomdp2, q)
    for g in ([1.0, 0.0], [-0.5, 1.0]):
        _, a, vertex, _ = proj.lmo(np.array(g))
        dec = decompose_target(s, pomdp2, q, vertex)
        total = pomdp2.F[a] @ q
        for o in range(pomdp2.num_observations):
            def observe(_a, o=o):
                return o
            _, nxt, _, _ = step_match(s, pomdp2, MatchState(q, vertex), dec,
                                      np.random.default_rng(0), env_observation=observe)
            p = float(pomdp2.u @ pomdp2.apply(a, o, q))
            total = total + pomdp2.gamma * p * nxt.target
        np.testing.assert_allclose(total, vertex, atol=1e-9)


def test_gamma_zero_plays_the_target_action():
    spec = random_mdp(1, gamma=0.0)
    m = mdp_to_psr(spec)
    s, _ = run_dp(m, BackupConfig(), sample_directions(0, 20, m.d, m.k))
    target = m.F[1] @ m.q1
    res = rollout_match(s, m, target, num_rollouts=50, seed=0)
    np.testing.assert_allclose(res.features, np.tile(target, (50, 1)), atol=1e-8)


def test_rollouts_reproduce_policy_target(grid3, grid3_set):
    target = policy_target(grid3, 7)
    res = rollout_match(grid3_set, grid3, target, num_rollouts=4000, seed=1)
    assert np.all(np.abs(res.mean - target) <= 4 * res.standard_error + res.truncation_bound)
    assert res.max_post_projection < 1e-6
    assert res.max_drift < 1e-6


def test_rollouts_are_deterministic(grid3, grid3_set):
    target = policy_target(grid3, 2)
    a = rollout_match(grid3_set, grid3, target, num_rollouts=200, seed=3)
    b = rollout_match(grid3_set, grid3, target, num_rollouts=200, seed=3)
    np.testing.assert_array_equal(a.features, b.features)


def test_truncation_horizon():
    m = mdp_to_psr(MdpSpec(transitions=np.ones((1, 1, 1)), features=np.ones((1, 1, 1)),
                           b1=np.ones(1), gamma=0.5))
    H = truncation_horizon(m, 1e-6)
    assert 0.5**H * 2 <= 1e-6 < 0.5**(H - 1) * 2
