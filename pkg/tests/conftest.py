import numpy as np
import pytest

from cfam.design import FunctionalCovariate, Grid, TrialData
from cfam.sim import Scenario, generate


def small_trial(n=80, p=2, q=2, L=2, r=25, seed=0, signal=1.0, pi=None):
    """Random trial with a modest interaction in X1 and Z1."""
    rng = np.random.default_rng(seed)
    grid = Grid.uniform(r)
    s = grid.points
    x = []
    for _ in range(p):
        coef = rng.normal(size=(n, 3))
        vals = coef[:, :1] + coef[:, 1:2] * np.sin(2 * np.pi * s) + coef[:, 2:3] * np.cos(2 * np.pi * s)
        x.append(FunctionalCovariate(vals, grid))
    z = rng.normal(size=(n, q))
    a = np.arange(n) % L + 1
    rng.shuffle(a)
    sign = np.where(a == 1, 1.0, -1.0) if L == 2 else (a - (L + 1) / 2)
    u = x[0].values.mean(axis=1) if p else np.zeros(n)
    zz = z[:, 0] if q else np.zeros(n)
    y = signal * sign * (np.sin(u) + zz) + rng.normal(size=n)
    return TrialData.create(y, a, x, z, pi=pi)


@pytest.fixture
def trial():
    return small_trial()


@pytest.fixture(scope="session")
def sim_small():
    return generate(Scenario(n=120, p=3, q=3, delta=1.0), np.random.default_rng(11))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
