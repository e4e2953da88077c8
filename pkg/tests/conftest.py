import sys

import numpy as np
import pytest

from ioncrystal import TrapConfig, derive_units
from ioncrystal.crystal import solve_equilibrium


@pytest.fixture(scope="session")
def config():
    return TrapConfig()


@pytest.fixture(scope="session")
def units(config):
    return derive_units(config)


@pytest.fixture(scope="session")
def T_D(config, units):
    return config.T_doppler / units.temp_unit


@pytest.fixture(scope="session")
def small_crystal(config):
    """30 ions in a short bookend trap: cheap but with genuine end effects."""
    return solve_equilibrium(config.with_length(40, N=30))


def harmonic_three_ion_positions(nu=1.0):
    # force balance: nu^2 u = 1/u^2 + 1/(2u)^2  ->  u^3 = 5 / (4 nu^2)
    u = (5.0 / (4.0 * nu**2)) ** (1.0 / 3.0)
    return np.array([-u, 0.0, u])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
