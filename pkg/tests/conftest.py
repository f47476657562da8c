import numpy as np
import pytest

from sfsets.dp import BackupConfig, run_dp, sample_directions
from sfsets.envs import GridSpec, gridworld_mdp, gridworld_pomdp
from sfsets.model import MdpSpec, PomdpSpec, mdp_to_psr, pomdp_to_psr


def random_mdp(seed, k=3, A=2, d=2, gamma=0.8):
    rng = np.random.default_rng(seed)
    T = rng.random((A, k, k)) + 0.05
    T /= T.sum(axis=1, keepdims=True)
    return MdpSpec(transitions=T, features=rng.normal(size=(k, A, d)),
                   b1=np.eye(k)[0], gamma=gamma)


def two_state_pomdp(gamma=0.9):
    T = np.array([[[0.9, 0.2], [0.1, 0.8]], [[0.3, 0.6], [0.7, 0.4]]])
    D = np.array([[0.8, 0.3], [0.2, 0.7]])
    f = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, -1.0], [0.5, 0.5]]])
    return PomdpSpec(transitions=T, features=f, b1=np.array([0.5, 0.5]), gamma=gamma,
                     observation_matrix=D)


@pytest.fixture(scope="session")
def grid3():
    return mdp_to_psr(gridworld_mdp(GridSpec(3, 3)))


@pytest.fixture(scope="session")
def grid3_spec():
    return gridworld_mdp(GridSpec(3, 3))


@pytest.fixture(scope="session")
def grid3_set(grid3):
    # tighter than the default so extreme policy targets lie inside within 1e-6
    D = sample_directions(0, 175, grid3.d, grid3.k)
    sfset, trace = run_dp(grid3, BackupConfig(convergence_tol=1e-10), D)
    assert trace.converged
    return sfset


@pytest.fixture(scope="session")
def pomdp4():
    return pomdp_to_psr(gridworld_pomdp(GridSpec(4, 4, noise=0.05)))


@pytest.fixture(scope="session")
def pomdp2():
    return pomdp_to_psr(two_state_pomdp())


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
