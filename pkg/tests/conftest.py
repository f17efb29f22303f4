import numpy as np
import pytest
from hypothesis import settings

from qentangle import CovMatrix, PhysConsts

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture
def natural():
    return PhysConsts.natural()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_spd(rng, d, jitter=0.2):
    a = rng.normal(size=(d, d))
    return CovMatrix(a @ a.T + jitter * d * np.eye(d))


def random_sym(rng, d):
    a = rng.normal(size=(d, d))
    return (a + a.T) / 2


# PASS/FAIL lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
