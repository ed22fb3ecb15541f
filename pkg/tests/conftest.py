import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

from qpeer.network import Network, make_dataset
from qpeer.simulate import make_rng, preset, simulate

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_adjacency(rng, n, p=0.3, weighted=False, min_degree=0):
    A = (rng.random((n, n)) < p).astype(float)
    np.fill_diagonal(A, 0.0)
    for i in range(n):
        while A[i].sum() < min(min_degree, n - 1):
            j = rng.integers(n)
            if j != i:
                A[i, j] = 1.0
    if weighted:
        A *= rng.uniform(0.2, 3.0, size=A.shape)
    return sp.csr_matrix(A)


def random_network(rng, sizes=(8, 12), p=0.3, weighted=False, min_degree=0):
    return Network.from_adjacency(
        [random_adjacency(rng, n, p, weighted, min_degree) for n in sizes]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    """DGP A on 20 subnetworks: enough for estimation, fast enough for unit tests."""
    return simulate(preset("A", S=20), make_rng(7))


@pytest.fixture(scope="session")
def small_sim_f():
    return simulate(preset("F", S=20), make_rng(8))


@pytest.fixture
def path3():
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 2] = 1
    return Network.from_adjacency([A])


@pytest.fixture
def star3():
    """Both leaves nominate the center (agent 0)."""
    A = np.zeros((3, 3))
    A[1, 0] = A[2, 0] = 1
    net = Network.from_adjacency([A])
    return net, make_dataset(net, np.zeros((3, 1)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
