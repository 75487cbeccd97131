import math

import numpy as np
import pytest

from tresca_shape.expression import ScalarField, VectorField2
from tresca_shape.mesh import generate_ellipse_mesh, left_edge_dirichlet, rectangle_mesh
from tresca_shape.tresca import ProblemData, solve_tresca

ELLIPSE_A = 1.1
ELLIPSE_B = 1 / 1.1
DIRICHLET_ARCS = [(2 * math.pi / 3, 4 * math.pi / 3), (5 * math.pi / 3, 7 * math.pi / 3)]
FORCE = ("-5*x*exp(x)", "0.6*exp(x^2)")
THRESHOLD = "1+sin(-y*pi/2)+1e-3"


def ellipse_problem(**overrides) -> ProblemData:
    return ProblemData(f=VectorField2(*FORCE), g=ScalarField(THRESHOLD), **overrides)


def ellipse_mesh(h):
    return generate_ellipse_mesh(ELLIPSE_A, ELLIPSE_B, h, DIRICHLET_ARCS)


def clamped_square(n=6):
    return rectangle_mesh(n, n, edge_tagger=left_edge_dirichlet)


@pytest.fixture(scope="session")
def pd():
    return ellipse_problem()


@pytest.fixture(scope="session")
def zero_force_pd():
    return ProblemData(f=VectorField2("0", "0"), g=ScalarField(THRESHOLD))


@pytest.fixture(scope="session")
def mesh05():
    return ellipse_mesh(0.05)


@pytest.fixture(scope="session")
def coarse_mesh():
    return ellipse_mesh(0.15)


@pytest.fixture(scope="session")
def solved05(mesh05, pd):
    u, state = solve_tresca(mesh05, pd)
    return mesh05, u, state


@pytest.fixture(scope="session")
def solved_coarse(coarse_mesh, pd):
    u, state = solve_tresca(coarse_mesh, pd)
    return coarse_mesh, u, state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
