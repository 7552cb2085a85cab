import numpy as np
import pytest

from maxwellest import mesh as msh
from maxwellest.estimate import manufactured_solution
from maxwellest.maxwell import solve_maxwell


@pytest.fixture(scope="session")
def cube2():
    mesh = msh.generate_structured_cube(2)
    return msh.build_topology(mesh)


@pytest.fixture(scope="session")
def single_tet_topo():
    mesh = msh.Mesh(
        vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
        tets=np.array([[0, 1, 2, 3]]),
        boundary_faces=np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]]),
        boundary_tags=np.zeros(4, dtype=int),
        region_of_tet=np.zeros(1, dtype=int),
    )
    return msh.build_topology(mesh)


@pytest.fixture(scope="session")
def identity_coeffs():
    return msh.CoefficientField.identity()


@pytest.fixture(scope="session")
def primal_m1_n2(identity_coeffs):
    """Reference primal solve: m=1, delta=0.5, p=1 on the n=2 cube."""
    exact = manufactured_solution(1, 0.5)
    mesh = msh.generate_structured_cube(2)
    sol = solve_maxwell(mesh, 1, exact.omega, identity_coeffs, exact.J)
    return sol, exact


@pytest.fixture(scope="session")
def equilibrated_m1_n2(primal_m1_n2):
    from maxwellest.equilibrate import equilibrate_fields

    sol, exact = primal_m1_n2
    return equilibrate_fields(sol, with_jumps=True), sol, exact
