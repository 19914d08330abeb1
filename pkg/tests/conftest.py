import numpy as np
import pytest

from relex.instances import m1, random_mdp
from relex.representation import coverage_instance, gen_tabular

ACCEPTANCE_LINES = []


@pytest.fixture
def spec_m1():
    return m1()


@pytest.fixture
def rep_m1(spec_m1):
    return gen_tabular(spec_m1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_random(rng):
    return random_mdp(rng, 3, 2, 3)


@pytest.fixture(scope="session")
def coverage():
    return coverage_instance(0)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
