import numpy as np
import pytest

from elasto import phantom

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """96x48 uniform compression pair used by the quicker solver tests."""
    spec = phantom.PhantomSpec(rows=96, cols=48, rng_seed=3)
    return phantom.simulate_pair(spec, phantom.DeformationSpec())
