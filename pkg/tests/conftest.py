import numpy as np
import pytest
from hypothesis import settings

from vastopo.volume import PhantomSpec, make_phantom

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom16():
    return make_phantom(PhantomSpec(dims=(16, 16, 16), seed=3, branch_count=2, tube_radius_range=(1, 1.5)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
