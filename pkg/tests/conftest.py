import numpy as np
import pytest

from levyspin.levy_models import LevyModel, PotentialDensity
from levyspin.mass_functions import builtin_mass
from levyspin.spectral_core import Grid, solve_spectrum


@pytest.fixture(scope="session")
def brownian():
    return LevyModel.brownian(1.0)


@pytest.fixture(scope="session")
def stable15():
    return LevyModel.stable(1.5, 1.0)


@pytest.fixture(scope="session")
def m_inv():
    return builtin_mass("inv_linear")


@pytest.fixture(scope="session")
def m_ex2():
    return builtin_mass("example2_rational")


@pytest.fixture(scope="session")
def ex1(brownian, m_inv):
    """Brownian motion, r = 1/2, m = 1/(1+|x|) on the default grid (60, 3001)."""
    return solve_spectrum(brownian, m_inv, 0.5, Grid(60.0, 3001))


@pytest.fixture(scope="session")
def ex2(brownian, m_ex2):
    """Brownian motion, r = 1/2, rational mass, default grid (40, 2001)."""
    return solve_spectrum(brownian, m_ex2, 0.5, Grid(40.0, 2001))


@pytest.fixture(scope="session")
def ex1_q1():
    return lambda x: np.sqrt(2.0 / 3.0) * (1.0 + np.abs(x)) * np.exp(-np.abs(x))


@pytest.fixture(scope="session")
def pd_half(brownian):
    return PotentialDensity(brownian, 0.5)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the test report."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        terminalreporter.write_line(verdicts[number])
