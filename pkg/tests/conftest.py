import numpy as np
import pytest

from swmimaging.optics import ImagingSystem


@pytest.fixture(scope="session")
def system():
    return ImagingSystem()


@pytest.fixture(scope="session")
def dl(system):
    return system.rayleigh_width


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
