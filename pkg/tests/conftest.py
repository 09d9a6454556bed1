import pytest

from acofi.environment import DynamicsConfig, WorldConfig
from acofi.safety_bellman import GridSpec, solve_safety_bellman

MICRO_DYN = DynamicsConfig(v=0.15, omega=0.8)
MICRO_GAMMA = 0.9


@pytest.fixture(scope="session")
def world():
    return WorldConfig()


@pytest.fixture(scope="session")
def micro_grid(world):
    return GridSpec(5, 5, 4, world.bounds)


@pytest.fixture(scope="session")
def micro_table(world, micro_grid):
    return solve_safety_bellman(world, micro_grid, MICRO_DYN, MICRO_GAMMA, tol=1e-6)


@pytest.fixture(scope="session")
def small_table(world):
    """Mid-size grid for closed-loop tests that do not need the default resolution."""
    return solve_safety_bellman(world, GridSpec(41, 41, 32, world.bounds), DynamicsConfig(), 0.98)


@pytest.fixture(scope="session")
def default_table(world):
    return solve_safety_bellman(world, GridSpec(), DynamicsConfig(), 0.98, 1e-6, 100_000)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
