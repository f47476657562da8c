import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_mdp
from sfsets.dp import BackupConfig, initial_set, run_dp, sample_directions
from sfsets.errors import DimensionUnsupported, EnumerationTooLarge
from sfsets.model import MdpSpec, mdp_to_psr
from sfsets.oracle import (ExactSet, MdpExactSupport, contraction_ratios, convex_hull_2d,
                           exact_sfset, exact_state_polygons, hausdorff_2d, pbvi_reference,
                           support_gap, value_iteration)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_horizon_zero_and_one(grid3):
    np.testing.assert_array_equal(exact_sfset(grid3, 0).points, np.zeros((1, 2, 9)))
    one = exact_sfset(grid3, 1).points
    # features depend only on the state, so every action gives the same matrix
    assert len(one) == 1
    np.testing.assert_array_equal(one[0], grid3.F[0])
    m = mdp_to_psr(random_mdp(0))
    got = {p.tobytes() for p in exact_sfset(m, 1).points}
    assert got == {m.F[a].tobytes() for a in range(2)}


def test_two_state_horizon_three_matches_trajectories():
    T = np.array([[[0.7, 0.4], [0.3, 0.6]], [[0.1, 0.5], [0.9, 0.5]]])
    f = np.array([[[1.0], [0.0]], [[-1.0], [2.0]]])
    spec = MdpSpec(transitions=T, features=f, b1=np.eye(2)[0], gamma=0.5)
    m = mdp_to_psr(spec)
    # open-loop action sequences are trees with identical children; their
    # matrices follow from propagating the state distribution directly
    ex = exact_sfset(m, 3)
    for seq in itertools.product(range(2), repeat=3):
        A = np.zeros((1, 2))
        for s0 in range(2):
            dist = np.eye(2)[s0]
            for t, a in enumerate(seq):
                A[0, s0] += 0.5**t * dist @ f[:, a, 0]
                dist = T[a] @ dist
        assert np.min(np.abs(ex.points - A).reshape(len(ex.points), -1).max(axis=1)) < 1e-12
    assert len(ex.points) <= 2**7


def test_enumeration_cap(grid3):
    with pytest.raises(EnumerationTooLarge):
        exact_sfset(grid3, 4, cap=10**6)


def test_cross_oracle_agreement():
    m = mdp_to_psr(random_mdp(5))
    D = sample_directions(0, 40, m.d, m.k)
    for H in range(4):
        np.testing.assert_allclose(exact_sfset(m, H).support(D.matrices),
                                   MdpExactSupport(m, H).support(D.matrices), atol=1e-12)


def test_gap_of_exact_with_itself_is_zero():
    m = mdp_to_psr(random_mdp(5))
    D = sample_directions(0, 40, m.d, m.k)
    s = initial_set(m, D)
    exact = MdpExactSupport(m, 1)
    rep = support_gap(exact, s, m, D, probe_states=np.eye(3))
    assert rep.max == pytest.approx(0.0, abs=1e-12)


def test_gap_within_tail_bound(grid3):
    D = sample_directions(0, 175, grid3.d, grid3.k)
    fmax = max(np.linalg.norm(F) for F in grid3.F)
    for H in (2, 4):
        s, _ = run_dp(grid3, BackupConfig(max_iters=H - 1, convergence_tol=0.0), D)
        rep = support_gap(MdpExactSupport(grid3, H), s, grid3, D, probe_states=np.eye(9))
        assert rep.max <= 1e-6 + 0.9**H * fmax / 0.1


def test_hausdorff_basics():
    assert hausdorff_2d(SQUARE, SQUARE) == 0.0
    assert hausdorff_2d(SQUARE, SQUARE + [0.3, 0.0]) == pytest.approx(0.3)
    assert hausdorff_2d(SQUARE, [[0.5, 0.5]]) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(DimensionUnsupported):
        hausdorff_2d(np.zeros((3, 3)), np.zeros((3, 3)))


def test_hull_drops_interior_and_collinear():
    pts = np.vstack([SQUARE, [[0.5, 0.5], [0.5, 0.0]]])
    assert len(convex_hull_2d(pts)) == 4


def test_exact_polygons_contract(grid3_spec):
    polys = exact_state_polygons(grid3_spec, 12)
    _, ratios = contraction_ratios(polys)
    assert np.all(ratios[np.isfinite(ratios)] <= 0.9 + 1e-9)


def test_value_iteration_small_cases():
    mdp = random_mdp(2, gamma=0.0)
    r = np.array([1.0, -1.0])
    np.testing.assert_allclose(value_iteration(mdp, r), (mdp.features @ r).max(axis=1))
    loop = MdpSpec(transitions=np.ones((1, 1, 1)), features=np.ones((1, 1, 1)),
                   b1=np.ones(1), gamma=0.9)
    assert value_iteration(loop, [1.0])[0] == pytest.approx(10.0)


def test_value_iteration_corner_policy(grid3_spec):
    V = value_iteration(grid3_spec, [-1.0, -1.0])
    assert np.argmax(V) == 0
    assert V[0] == pytest.approx(20.0)
    assert V[1] == pytest.approx(1.0 + 0.9 * 20.0)


def test_pbvi_reference_cases(grid3, grid3_spec):
    zero = pbvi_reference(grid3, [1.0, 0.0], np.eye(9), 0)
    np.testing.assert_array_equal(zero, np.zeros((1, 9)))
    r = np.array([0.3, -0.8])
    alphas = pbvi_reference(grid3, r, np.eye(9), 300)
    np.testing.assert_allclose(alphas.max(axis=0), value_iteration(grid3_spec, r), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_hausdorff_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (rng.normal(size=(6, 2)) for _ in range(3))
    ab = hausdorff_2d(A, B)
    assert ab == pytest.approx(hausdorff_2d(B, A))
    assert ab <= hausdorff_2d(A, C) + hausdorff_2d(C, B) + 1e-12
    shift = rng.normal(size=2)
    assert hausdorff_2d(A, A + shift) == pytest.approx(np.linalg.norm(shift))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), H=st.integers(0, 3))
def test_support_recursion(seed, H):
    # h_{H+1}(m) = max_a [<m, F_a> + gamma sum_o h_H(m T_ao^T)]
    m = mdp_to_psr(random_mdp(seed, k=3, A=2))
    M = sample_directions(seed, 10, m.d, m.k).matrices
    nxt = MdpExactSupport(m, H + 1).support(M)
    cur = MdpExactSupport(m, H)
    rhs = np.full(len(M), -np.inf)
    for a in range(m.num_actions):
        tot = np.einsum("ndk,dk->n", M, m.F[a])
        for o in range(m.num_observations):
            tot = tot + m.gamma * cur.support(M @ m.T(a, o).T)
        rhs = np.maximum(rhs, tot)
    np.testing.assert_allclose(nxt, rhs, atol=1e-10)
