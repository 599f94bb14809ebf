import numpy as np
import pytest

from safcar.data.dataset import ClipDataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training tests")


@pytest.fixture(scope="session")
def small_dataset():
    """8 verbs x 12 nouns x 1 seed at a reduced size (T=4, 16x16)."""
    return ClipDataset.generate(range(8), range(12), [0], dims=(4, 16, 16), workers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion; echoed in the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
