import numpy as np
import pytest

from clusterhte.data import ClusteredSample
from clusterhte.simulation import DgpConfig, gen_dgp

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_sample(C=40, n=6, levels=(0.0, 0.5), seed=0, d=1, tau=None, noise=0.3):
    """Small clustered sample with ``n`` units per cluster and half treated.

    Levels alternate across clusters; treatment is balanced within each
    cluster, so every (level, t) cell is populated.
    """
    rng = np.random.default_rng(seed)
    cluster = np.repeat(np.arange(C), n)
    x = rng.random((C * n, d))
    t = np.tile(np.arange(n) % 2, C).astype(float)
    pi = np.repeat(np.array(levels)[np.arange(C) % len(levels)], n)
    effect = np.zeros(C * n) if tau is None else tau(x, pi)
    y = effect * t + noise * rng.standard_normal(C * n)
    return ClusteredSample(cluster=cluster, y=y, t=t, x=x, pi=pi)


@pytest.fixture
def small_sample():
    return make_sample()


@pytest.fixture(scope="session")
def dgp_sample():
    return gen_dgp(DgpConfig(C=60, beta0=1.0), 123)
