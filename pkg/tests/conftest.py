import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; lines are repeated in the terminal summary."""

    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} {name}: {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
