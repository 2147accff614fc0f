import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rwdre.core import JumpKernel, ModelSpec
from rwdre.env import IIDField, SiteChain, TorusMarkov

settings.register_profile("rwdre", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rwdre")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def m1():
    return ModelSpec(1, 2, ((0,),), ((-1,), (1,)), JumpKernel(np.array([[0.75, 0.25], [0.25, 0.75]])))


@pytest.fixture(scope="session")
def m2():
    return TorusMarkov.flip(3, 0.3)


@pytest.fixture(scope="session")
def iid07():
    return IIDField(np.array([0.3, 0.7]))


@pytest.fixture(scope="session")
def iid05():
    return IIDField(np.array([0.5, 0.5]))


@pytest.fixture(scope="session")
def sites():
    return SiteChain.flip(0.3)
