import numpy as np
import pytest

from csinv import fdfd
from csinv.grid import build_grid, build_pml

OMEGA = 2 * np.pi * 2.0e8


@pytest.fixture(scope="session")
def vacuum_grid_nopml():
    return build_grid((0.5, 0.5, 0.5), [], OMEGA, pml_cells=0, spacing=0.05)


@pytest.fixture(scope="session")
def vacuum_grid_pml():
    return build_grid((0.5, 0.5, 0.5), [], OMEGA, pml_cells=4, spacing=0.05)


@pytest.fixture(scope="session")
def a_nopml(vacuum_grid_nopml):
    return fdfd.assemble(vacuum_grid_nopml, build_pml(vacuum_grid_nopml))


@pytest.fixture(scope="session")
def a_pml(vacuum_grid_pml):
    return fdfd.assemble(vacuum_grid_pml, build_pml(vacuum_grid_pml))
