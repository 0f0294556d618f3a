import math

import numpy as np
import pytest

from fracopt.mesh import BaseMesh, extrude, graded_interval, initial_mesh, uniform_refine
from fracopt.optimizer import DiscreteSystem, ProblemData

ACCEPTANCE_LINES = []


def refinement_mesh(base, s):
    """Extruded mesh over ``base`` with the default Y, M and gamma rules."""
    nT = base.n_triangles
    Y = 1.0 + math.log(nT) / 3.0
    M = int(math.ceil(math.sqrt(nT)))
    return extrude(base, graded_interval(Y, M, 3.0 / (2.0 * s) * 1.1), 1.0 - 2.0 * s)


def grid_mesh(nx, ny, hx=1.0, hy=1.0):
    """Structured ``nx x ny`` rectangle grid, each cell split in two."""
    xs = np.linspace(0.0, nx * hx, nx + 1)
    ys = np.linspace(0.0, ny * hy, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    tris = []
    for i in range(nx):
        for j in range(ny):
            sw, se, nw, ne = idx[i, j], idx[i + 1, j], idx[i, j + 1], idx[i + 1, j + 1]
            tris += [[se, ne, sw], [nw, sw, ne]]
    bnd = (np.isclose(verts[:, 0], 0) | np.isclose(verts[:, 0], nx * hx)
           | np.isclose(verts[:, 1], 0) | np.isclose(verts[:, 1], ny * hy))
    return BaseMesh(verts, tris, bnd, perimeter=2.0 * (nx * hx + ny * hy))


@pytest.fixture(scope="session")
def lshape_case():
    """A small solved L-shape control problem shared by several tests."""
    from fracopt.optimizer import active_set_solve

    data = ProblemData(s=0.3, sigma=0.1, nu=0.5)
    base = uniform_refine(initial_mesh("l-shape"), 3)
    mesh = refinement_mesh(base, data.s)
    system = DiscreteSystem(mesh, data)
    quad, its = active_set_solve(data, mesh, system=system)
    return data, mesh, system, quad


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
