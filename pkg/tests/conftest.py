import pytest

from app.services.barrier import extract_barrier, regularize
from app.services.measures import contact_set, dirac
from app.services.obstacle_pde import ConstantSigma, Grid, solve_obstacle
from tests.helpers import three_atoms


@pytest.fixture(scope="session")
def three_atom_grid() -> Grid:
    return Grid.from_cfl(-1.0, 1.0, 2.0, 50_000, 0.2)


@pytest.fixture(scope="session")
def three_atom_solution(three_atom_grid):
    return solve_obstacle(ConstantSigma(1.0), dirac(0.0), three_atoms(), three_atom_grid, store="stream")


@pytest.fixture(scope="session")
def three_atom_barrier(three_atom_solution, three_atom_grid):
    nu = three_atoms()
    barrier = extract_barrier(three_atom_solution, nu)
    return regularize(barrier, contact_set(dirac(0.0), nu, three_atom_grid.xs))
