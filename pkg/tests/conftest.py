import numpy as np
import pytest

from slowfast.model import builtin_model

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def lin16():
    return builtin_model("linear-ou", 16)


@pytest.fixture(scope="session")
def x16():
    return np.arange(1, 17, dtype=float) ** -1.2


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
