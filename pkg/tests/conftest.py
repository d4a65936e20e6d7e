import sys

import numpy as np
import pytest

from greenpeel.grid_pde import assemble, build_grid, dense_kernel


@pytest.fixture(scope="session")
def poisson_1d_256():
    op = assemble(build_grid(1, 256))
    return op, dense_kernel(op)


@pytest.fixture(scope="session")
def poisson_2d_32():
    op = assemble(build_grid(2, 32))
    return op, dense_kernel(op)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
