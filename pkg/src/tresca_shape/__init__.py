"""Tresca friction elasticity, shape gradients and volume-constrained shape optimization in 2D."""

from .mesh import Mesh, generate_ellipse_mesh, deform, area, boundary_frame, mean_curvature, mesh_quality
from .tresca import ProblemData, ContactState, Mode, solve_tresca, energy

__all__ = [
    "Mesh",
    "generate_ellipse_mesh",
    "deform",
    "area",
    "boundary_frame",
    "mean_curvature",
    "mesh_quality",
    "ProblemData",
    "ContactState",
    "Mode",
    "solve_tresca",
    "energy",
]
