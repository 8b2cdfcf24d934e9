import warnings

import numpy as np
import pytest

from zdecay.fock import build_basis, geometric_grid, toy_grid
from zdecay.hamiltonian import assemble, cutoff_family
from zdecay.kernels import build_kernel_table, power_law_surrogate
from zdecay.spectral import SectorEigensystem, run_cascade

M_Z = 91.18

# Lines collected by test_acceptance and echoed in the terminal summary.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def surrogate_table(grid, derivatives=True):
    return build_kernel_table(grid, mode="surrogate", surrogate=power_law_surrogate(), derivatives=derivatives)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid():
    return geometric_grid()


@pytest.fixture(scope="session")
def table(grid):
    return build_kernel_table(grid)


@pytest.fixture(scope="session")
def basis(grid):
    return build_basis(grid, (2, 2, 2))


@pytest.fixture(scope="session")
def hset(basis, table):
    return assemble(basis, table, 0.05)


@pytest.fixture(scope="session")
def family(hset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return cutoff_family(hset, 3)


@pytest.fixture(scope="session")
def eig(hset):
    return SectorEigensystem.build(hset.H, hset.basis)


@pytest.fixture(scope="session")
def spectrum(eig):
    return eig.low(eig.values[0] + M_Z / 3)


@pytest.fixture(scope="session")
def cascade(family):
    return run_cascade(family)


@pytest.fixture(scope="session")
def toy8():
    """Dimension-8 instance: one mode per species, caps (1, 1, 1)."""
    g = toy_grid(1, 1, 1)
    return build_basis(g, (1, 1, 1)), surrogate_table(g)


@pytest.fixture(scope="session")
def toy_small():
    """2+2 fermion modes, one boson, caps (2, 2, 2)."""
    g = toy_grid(2, 2, 1)
    b = build_basis(g, (2, 2, 2))
    return assemble(b, surrogate_table(g), 0.1)
