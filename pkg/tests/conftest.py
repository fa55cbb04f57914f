import numpy as np
import pytest

from m3ae import autodiff as ad


@pytest.fixture(autouse=True)
def _debug_mode():
    """Every op checks its output for NaN/inf while tests run."""
    ad.set_debug(True)
    yield
    ad.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
