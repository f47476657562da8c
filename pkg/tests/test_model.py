import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_mdp, two_state_pomdp
from sfsets.envs import GridSpec, gridworld_mdp, gridworld_pomdp
from sfsets.errors import SingularCoreTests, ZeroProbabilityObservation
from sfsets.model import (MdpSpec, PomdpSpec, PsrModel, SimpleTest, feature_vector, load_model,
                          mdp_from_psr, mdp_to_psr, observation_probs, pomdp_to_psr, psr_update,
                          sample_reachable_states, save_model, similarity_transform, test_value,
                          transform_via_core_tests, validate_model)


def test_one_state_embedding():
    spec = MdpSpec(transitions=np.ones((1, 1, 1)), features=np.ones((1, 1, 1)),
                   b1=np.ones(1), gamma=0.5)
    m = mdp_to_psr(spec)
    assert (m.k, m.num_actions, m.num_observations, m.d) == (1, 1, 1, 1)
    np.testing.assert_array_equal(m.T(0, 0), [[1.0]])
    np.testing.assert_array_equal(m.u, [1.0])
    np.testing.assert_array_equal(m.F[0], [[1.0]])


def test_fig2_gridworld_shape(grid3):
    assert (grid3.k, grid3.num_actions, grid3.d) == (9, 4, 2)


@pytest.mark.parametrize("seed", range(3))
def test_paired_simulation_matches_mdp(seed):
    spec = random_mdp(seed, k=4, A=3)
    m = mdp_to_psr(spec)
    rng = np.random.default_rng(seed)
    s, q = 0, np.eye(4)[0]
    for _ in range(100):
        a = int(rng.integers(3))
        u = rng.random()
        s = int(np.searchsorted(np.cumsum(spec.transitions[a][:, s]), u))
        o = int(np.searchsorted(np.cumsum(observation_probs(m, q, a)), u))
        q, _ = psr_update(m, q, a, o)
        assert o == s
        np.testing.assert_allclose(q, np.eye(4)[s], atol=1e-12)


def test_identity_observations_match_mdp():
    mdp = random_mdp(1)
    pom = PomdpSpec(transitions=mdp.transitions, features=mdp.features, b1=mdp.b1,
                    gamma=mdp.gamma, observation_matrix=np.eye(3))
    a, b = mdp_to_psr(mdp), pomdp_to_psr(pom)
    for act, o in itertools.product(range(2), range(3)):
        np.testing.assert_allclose(a.T(act, o), b.T(act, o), atol=1e-15)
    np.testing.assert_allclose(a.F, b.F)


def test_noisy_gridworld_pomdp_validates():
    m = pomdp_to_psr(gridworld_pomdp(GridSpec(4, 4, noise=0.05)))
    assert validate_model(m, num_trajectories=10, horizon=15).passed


def test_deterministic_cycle_update():
    T = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    m = mdp_to_psr(MdpSpec(transitions=T, features=np.zeros((2, 1, 1)), b1=np.eye(2)[0],
                           gamma=0.5))
    q, p = psr_update(m, np.eye(2)[0], 0, 1)
    np.testing.assert_array_equal(q, [0.0, 1.0])
    assert p == 1.0


def test_bayes_update_matches_hand_computation(pomdp2):
    spec = two_state_pomdp()
    b = np.array([0.5, 0.5])
    a, o = 1, 0
    pred = spec.transitions[a] @ b
    post = spec.observation_matrix[o] * pred
    q, p = psr_update(pomdp2, b, a, o)
    np.testing.assert_allclose(p, post.sum(), atol=1e-15)
    np.testing.assert_allclose(q, post / post.sum(), atol=1e-15)


def test_zero_probability_observation():
    T = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    m = mdp_to_psr(MdpSpec(transitions=T, features=np.zeros((2, 1, 1)), b1=np.eye(2)[0],
                           gamma=0.5))
    with pytest.raises(ZeroProbabilityObservation):
        psr_update(m, np.eye(2)[0], 0, 0)


def test_observation_probs_mdp_and_uniform():
    mdp = random_mdp(2)
    m = mdp_to_psr(mdp)
    np.testing.assert_allclose(observation_probs(m, np.eye(3)[1], 0), mdp.transitions[0][:, 1])
    pom = PomdpSpec(transitions=mdp.transitions, features=mdp.features, b1=mdp.b1,
                    gamma=mdp.gamma, observation_matrix=np.full((4, 3), 0.25))
    np.testing.assert_allclose(observation_probs(pomdp_to_psr(pom), [0.2, 0.3, 0.5], 1),
                               np.full(4, 0.25))


def test_feature_vector(grid3):
    np.testing.assert_array_equal(feature_vector(grid3, np.eye(9)[0], 2), [-1.0, -1.0])
    np.testing.assert_array_equal(feature_vector(grid3, np.eye(9)[8], 0), [1.0, 1.0])
    mix = 0.25 * np.eye(9)[0] + 0.75 * np.eye(9)[8]
    np.testing.assert_allclose(feature_vector(grid3, mix, 1), [0.5, 0.5])


def test_test_values(pomdp2):
    q = np.array([0.3, 0.7])
    assert test_value(pomdp2, q, SimpleTest((), ())) == pytest.approx(1.0)
    assert test_value(pomdp2, q, SimpleTest((1,), (0,))) == pytest.approx(
        observation_probs(pomdp2, q, 1)[0])
    # chain rule by enumerating hidden-state paths
    spec = two_state_pomdp()
    T, D = spec.transitions, spec.observation_matrix
    total = sum(q[s0] * T[0][s1, s0] * D[1, s1] * T[1][s2, s1] * D[0, s2]
                for s0 in range(2) for s1 in range(2) for s2 in range(2))
    assert test_value(pomdp2, q, SimpleTest((0, 1), (1, 0))) == pytest.approx(total, abs=1e-15)


def test_identity_transform():
    m = mdp_to_psr(MdpSpec(transitions=np.ones((1, 1, 1)), features=np.ones((1, 1, 1)),
                           b1=np.ones(1), gamma=0.5))
    t = transform_via_core_tests(m, [SimpleTest((), ())])
    np.testing.assert_array_equal(t.T(0, 0), m.T(0, 0))
    np.testing.assert_array_equal(t.q1, m.q1)
    g = mdp_to_psr(random_mdp(0))
    same = similarity_transform(g, np.eye(3))
    np.testing.assert_allclose(same.F, g.F)


def test_dependent_tests_are_singular(pomdp2):
    with pytest.raises(SingularCoreTests):
        transform_via_core_tests(pomdp2, [SimpleTest((0,), (0,)), SimpleTest((0,), (0,))])


def test_validation_detects_corruption():
    m = mdp_to_psr(random_mdp(3))
    assert validate_model(m).passed
    assert validate_model(m).max_sum_deviation <= 4 * np.finfo(float).eps
    blocks = tuple(tuple(1.1 * b for b in ba) for ba in m.blocks)
    bad = PsrModel(q1=m.q1, u=m.u, F=m.F, rows=m.rows, blocks=blocks, gamma=m.gamma)
    assert not validate_model(bad).passed


def test_json_round_trip(tmp_path, pomdp2):
    path = tmp_path / "m.json"
    save_model(pomdp2, path)
    back = load_model(path)
    assert back.fingerprint == pomdp2.fingerprint
    for a, o in itertools.product(range(2), range(2)):
        np.testing.assert_array_equal(back.T(a, o), pomdp2.T(a, o))


def test_mdp_recovery(grid3, pomdp2):
    assert mdp_from_psr(pomdp2) is None
    spec = mdp_from_psr(grid3)
    np.testing.assert_array_equal(spec.transitions, gridworld_mdp(GridSpec(3, 3)).transitions)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), noise=st.floats(0.0, 0.5))
def test_beliefs_stay_normalized(seed, noise):
    mdp = random_mdp(seed, k=3, A=2)
    rng = np.random.default_rng(seed)
    D = (1 - noise) * np.eye(3) + noise * rng.dirichlet(np.ones(3), size=3).T
    m = pomdp_to_psr(PomdpSpec(transitions=mdp.transitions, features=mdp.features,
                               b1=np.full(3, 1 / 3), gamma=0.9, observation_matrix=D))
    for q in sample_reachable_states(m, 5, horizon=6, seed=seed):
        assert q.sum() == pytest.approx(1.0, abs=1e-12)
        assert q.min() >= -1e-12
        for a in range(2):
            p = observation_probs(m, q, a)
            assert p.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_transform_preserves_predictions(seed):
    m = pomdp_to_psr(two_state_pomdp())
    rng = np.random.default_rng(seed)
    tests = [SimpleTest((), ()), SimpleTest((int(rng.integers(2)),), (int(rng.integers(2)),))]
    try:
        t = transform_via_core_tests(m, tests)
    except SingularCoreTests:
        return
    S = np.stack([np.ones(2), m.u @ m.T(tests[1].actions[0], tests[1].observations[0])])
    probe = SimpleTest((1, 0), (0, 1))
    for q in sample_reachable_states(m, 5, horizon=4, seed=seed):
        assert test_value(t, S @ q, probe) == pytest.approx(test_value(m, q, probe), abs=1e-12)
