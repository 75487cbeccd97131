"""Triangular meshes with a tagged boundary, boundary frames and curvature."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.spatial import Delaunay

DIRICHLET = 0
TRESCA = 1

_tokens = itertools.count()


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class ConfigurationError(ValueError):
    """Inconsistent geometric configuration (e.g. empty Dirichlet or Tresca part)."""


class DeformationError(RuntimeError):
    def __init__(self, triangle: int, t_max: float):
        self.triangle = triangle
        self.t_max = t_max
        super().__init__(f"triangle {triangle} inverts; largest admissible step {t_max:.6g}")


def _rot90(v):
    """Counterclockwise rotation by pi/2 of an (..., 2) array."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def signed_areas(vertices, triangles):
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True)
class BoundaryFrame:
    """Per boundary node data, in counterclockwise order (aligned with ``Mesh.boundary_nodes``)."""

    normal: np.ndarray
    tangent: np.ndarray
    weight: np.ndarray
    curvature: np.ndarray


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation with a closed, counterclockwise tagged boundary.

    ``boundary_edges[k] = (boundary_nodes[k], boundary_nodes[k+1])``.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    token: int

    @classmethod
    def from_triangles(cls, vertices, triangles, edge_tagger=None, *, require_both_tags=False):
        """Build a mesh, extracting and orienting the boundary loop.

        ``edge_tagger(p, q)`` receives the endpoint coordinates of a boundary
        edge (arrays of shape (m, 2)) and returns DIRICHLET/TRESCA tags.  By
        default every edge is TRESCA.
        """
        vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64)
        area = signed_areas(vertices, triangles)
        flip = area < 0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        edges = _boundary_loop(triangles, len(vertices))
        if edge_tagger is None:
            tags = np.full(len(edges), TRESCA, dtype=np.int8)
        else:
            tags = np.asarray(edge_tagger(vertices[edges[:, 0]], vertices[edges[:, 1]]), dtype=np.int8)
        mesh = cls._make(vertices, triangles, edges, tags)
        mesh.validate(require_both_tags=require_both_tags)
        return mesh

    @classmethod
    def _make(cls, vertices, triangles, edges, tags):
        for arr in (vertices, triangles, edges, tags):
            arr.setflags(write=False)
        return cls(vertices, triangles, edges, tags, next(_tokens))

    def validate(self, require_both_tags=False):
        area = signed_areas(self.vertices, self.triangles)
        if np.any(area <= 0):
            raise MeshError(f"triangle {int(np.argmin(area))} has non-positive area")
        if require_both_tags:
            if not np.any(self.node_tags == DIRICHLET):
                raise ConfigurationError("Dirichlet boundary is empty")
            if not np.any(self.node_tags == TRESCA):
                raise ConfigurationError("Tresca boundary is empty")

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nt(self) -> int:
        return len(self.triangles)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return self.boundary_edges[:, 0].copy()

    @cached_property
    def node_tags(self) -> np.ndarray:
        """Tag per boundary node; a node touching a Dirichlet edge is Dirichlet."""
        prev_tag = np.roll(self.edge_tags, 1)
        tags = np.where((self.edge_tags == DIRICHLET) | (prev_tag == DIRICHLET), DIRICHLET, TRESCA)
        return tags.astype(np.int8)

    @cached_property
    def dirichlet_nodes(self) -> np.ndarray:
        return self.boundary_nodes[self.node_tags == DIRICHLET]

    @cached_property
    def tresca_positions(self) -> np.ndarray:
        """Positions (within the boundary loop) of Tresca nodes."""
        return np.flatnonzero(self.node_tags == TRESCA)

    @cached_property
    def tresca_nodes(self) -> np.ndarray:
        return self.boundary_nodes[self.tresca_positions]

    @cached_property
    def frame(self) -> BoundaryFrame:
        return boundary_frame(self)

    @cached_property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    @cached_property
    def h(self) -> float:
        """Mean edge length."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return float(np.mean(np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)))

    def with_vertices(self, vertices) -> "Mesh":
        vertices = np.array(vertices, dtype=float)
        return Mesh._make(vertices, self.triangles.copy(), self.boundary_edges.copy(), self.edge_tags.copy())


def _boundary_loop(triangles, nv):
    """Boundary edges (each used by exactly one triangle), chained counterclockwise."""
    t = triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inverse, counts = np.unique(key[:, 0] * nv + key[:, 1], return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge shared by more than two triangles")
    bnd = directed[counts[inverse] == 1]
    if len(bnd) < 3:
        raise MeshError("mesh has no boundary")
    succ = {}
    for a, b in bnd:
        if a in succ:
            raise MeshError(f"boundary is not a simple curve at node {a}")
        succ[int(a)] = int(b)
    start = int(bnd[:, 0].min())
    loop = [start]
    while True:
        nxt = succ[loop[-1]]
        if nxt == start:
            break
        loop.append(nxt)
        if len(loop) > len(bnd):
            raise MeshError("boundary loop does not close")
    if len(loop) != len(bnd):
        raise MeshError("boundary edges form more than one closed curve")
    loop = np.array(loop, dtype=np.int64)
    return np.stack([loop, np.roll(loop, -1)], axis=1)


def area(mesh: Mesh) -> float:
    return float(signed_areas(mesh.vertices, mesh.triangles).sum())


def _edge_geometry(mesh: Mesh):
    """Edge vectors, lengths and unit directions for the boundary loop."""
    v = mesh.vertices
    d = v[mesh.boundary_edges[:, 1]] - v[mesh.boundary_edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    return d, length, d / length[:, None]


def boundary_frame(mesh: Mesh) -> BoundaryFrame:
    _, length, e = _edge_geometry(mesh)
    nu = -_rot90(e)  # outward normal of a counterclockwise edge
    m = nu + np.roll(nu, 1, axis=0)
    normal = m / np.linalg.norm(m, axis=1)[:, None]
    tangent = _rot90(normal)
    weight = 0.5 * (length + np.roll(length, 1))
    return BoundaryFrame(normal, tangent, weight, mean_curvature(mesh))


def mean_curvature(mesh: Mesh) -> np.ndarray:
    """Turning angle at each boundary node over the mean adjacent edge length.

    Positive on convex parts; a circle of radius R gives 1/R.
    """
    _, length, e = _edge_geometry(mesh)
    e_prev = np.roll(e, 1, axis=0)
    cross = e_prev[:, 0] * e[:, 1] - e_prev[:, 1] * e[:, 0]
    dot = np.sum(e_prev * e, axis=1)
    turn = np.arctan2(cross, dot)
    return turn / (0.5 * (length + np.roll(length, 1)))


def deform(mesh: Mesh, theta, t: float) -> Mesh:
    """Move vertices to ``x + t*theta(x)``; raises DeformationError on inversion."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != mesh.vertices.shape:
        raise ValueError(f"theta has shape {theta.shape}, expected {mesh.vertices.shape}")
    dn = mesh.dirichlet_nodes
    if len(dn) and np.max(np.abs(theta[dn])) > 0.0:
        raise ValueError("theta must vanish on Dirichlet nodes")
    new = mesh.vertices + t * theta
    a = signed_areas(new, mesh.triangles)
    if np.any(a <= 0):
        bad = int(np.argmin(a))
        raise DeformationError(bad, _largest_admissible_step(mesh, theta, t))
    return mesh.with_vertices(new)


def _largest_admissible_step(mesh, theta, t, iters=60):
    lo, hi = 0.0, t
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.all(signed_areas(mesh.vertices + mid * theta, mesh.triangles) > 0):
            lo = mid
        else:
            hi = mid
    return lo


def triangle_angles(vertices, triangles) -> np.ndarray:
    """Interior angles, shape (nt, 3), angle k at vertex k."""
    p = vertices[triangles]
    angles = np.empty(triangles.shape)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
        angles[:, k] = np.arctan2(cross, np.sum(a * b, axis=1))
    return angles


def mesh_quality(mesh: Mesh) -> tuple[float, float]:
    """(minimum angle in radians, maximum aspect ratio R/(2r), 1 for equilateral)."""
    p = mesh.vertices[mesh.triangles]
    la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    a = np.abs(signed_areas(mesh.vertices, mesh.triangles))
    s = 0.5 * (la + lb + lc)
    with np.errstate(divide="ignore"):
        circum = la * lb * lc / (4.0 * a)
        inr = a / s
        aspect = circum / (2.0 * inr)
    min_angle = float(triangle_angles(mesh.vertices, mesh.triangles).min())
    return min_angle, float(np.max(aspect))


# ---------------------------------------------------------------------------
# generators


def _normalize_arcs(arcs):
    """Map angle intervals to a sorted list of disjoint subintervals of [0, 2pi]."""
    two_pi = 2 * math.pi
    out = []
    for lo, hi in arcs:
        if not hi > lo:
            raise ConfigurationError(f"degenerate arc [{lo}, {hi}]")
        if hi - lo >= two_pi - 1e-12:
            out.append((0.0, two_pi))
            continue
        lo_m = lo % two_pi
        hi_m = lo_m + (hi - lo)
        if hi_m <= two_pi + 1e-12:
            out.append((lo_m, min(hi_m, two_pi)))
        else:
            out.append((lo_m, two_pi))
            out.append((0.0, hi_m - two_pi))
    return sorted(out)


def _in_arcs(gamma, arcs, tol=1e-12):
    inside = np.zeros(np.shape(gamma), dtype=bool)
    for lo, hi in arcs:
        inside |= (gamma >= lo - tol) & (gamma <= hi + tol)
    return inside


def ellipse_parameters(a: float, b: float, h: float, breakpoints=()) -> np.ndarray:
    """Angles in [0, 2pi) whose points are close to equally spaced in arclength.

    Every breakpoint (mod 2pi) is included exactly.
    """
    two_pi = 2 * math.pi
    fine = np.linspace(0.0, two_pi, 20001)
    speed = np.hypot(a * np.sin(fine), b * np.cos(fine))
    s = cumulative_trapezoid(speed, fine, initial=0.0)
    marks = sorted({0.0} | {float(bp % two_pi) for bp in breakpoints})
    marks = [m for i, m in enumerate(marks) if i == 0 or m - marks[i - 1] > 1e-9]
    if two_pi - marks[-1] < 1e-9:
        marks.pop()
    marks.append(two_pi)
    params = []
    for g0, g1 in zip(marks[:-1], marks[1:]):
        s0, s1 = np.interp([g0, g1], fine, s)
        n = max(1, int(round((s1 - s0) / h)))
        targets = np.linspace(s0, s1, n + 1)[:-1]
        g = np.interp(targets, s, fine)
        g[0] = g0
        params.append(g)
    return np.concatenate(params)


def generate_ellipse_mesh(a: float, b: float, h: float, dirichlet_arcs) -> Mesh:
    """Triangulate the ellipse ``(a cos g, b sin g)`` at target edge length ``h``.

    Boundary nodes lie on the ellipse, arc endpoints included, so an edge is
    Dirichlet exactly when both endpoint parameters fall in a Dirichlet arc.
    The interior is filled with staggered concentric rings, triangulated by
    Delaunay and relaxed by a few Laplacian sweeps.
    """
    if not (a > 0 and b > 0 and 0 < h < min(a, b)):
        raise ConfigurationError("need a > 0, b > 0 and 0 < h < min(a, b)")
    arcs = _normalize_arcs(dirichlet_arcs)
    bps = [x for arc in arcs for x in arc]
    gamma = ellipse_parameters(a, b, h, bps)
    boundary = np.stack([a * np.cos(gamma), b * np.sin(gamma)], axis=1)

    pts = [boundary]
    mean_r = 0.5 * (a + b)
    layer = 1
    while True:
        scale = 1.0 - layer * h * math.sqrt(3) / 2 / mean_r
        if scale * min(a, b) < 0.6 * h:
            break
        ga = ellipse_parameters(a * scale, b * scale, h)
        ga = ga + (0.5 * (ga[1] - ga[0]) if layer % 2 else 0.0)
        pts.append(np.stack([a * scale * np.cos(ga), b * scale * np.sin(ga)], axis=1))
        layer += 1
    pts.append(np.zeros((1, 2)))
    vertices = np.concatenate(pts)
    nb = len(boundary)

    tri = Delaunay(vertices)
    triangles = tri.simplices.astype(np.int64)
    triangles = triangles[np.abs(signed_areas(vertices, triangles)) > 1e-14 * h * h]

    vertices = _laplacian_relax(vertices, triangles, nb, sweeps=6)

    def tagger(p, q):
        gp = np.mod(np.arctan2(p[:, 1] / b, p[:, 0] / a), 2 * math.pi)
        gq = np.mod(np.arctan2(q[:, 1] / b, q[:, 0] / a), 2 * math.pi)
        # 2pi is the same point as 0
        gq = np.where((gq < 1e-12) & (gp > math.pi), 2 * math.pi, gq)
        gp = np.where((gp > 2 * math.pi - 1e-12) & (gq < math.pi), 0.0, gp)
        both = _in_arcs(gp, arcs) & _in_arcs(gq, arcs)
        mid = 0.5 * (gp + gq)
        both &= _in_arcs(mid, arcs)
        return np.where(both, DIRICHLET, TRESCA)

    return Mesh.from_triangles(vertices, triangles, tagger, require_both_tags=True)


def _laplacian_relax(vertices, triangles, n_fixed, sweeps):
    """Move interior nodes (index >= n_fixed) to neighbour averages, refusing inverting moves."""
    nv = len(vertices)
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    deg = np.bincount(e[:, 0], minlength=nv).astype(float)
    v = vertices.copy()
    for _ in range(sweeps):
        acc = np.zeros_like(v)
        np.add.at(acc, e[:, 0], v[e[:, 1]])
        target = acc / np.maximum(deg, 1)[:, None]
        trial = v.copy()
        trial[n_fixed:] = target[n_fixed:]
        if np.all(signed_areas(trial, triangles) > 0):
            v = trial
        else:
            break
    return v


def rectangle_mesh(nx: int, ny: int, width=1.0, height=1.0, edge_tagger=None, diagonal="alternate") -> Mesh:
    """Structured triangulation of ``[0, width] x [0, height]``."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    tris = []
    for j in range(ny):
        for i in range(nx):
            p = j * (nx + 1) + i
            q, r, s = p + 1, p + nx + 1, p + nx + 2
            if diagonal == "right" or (diagonal == "alternate" and (i + j) % 2 == 0):
                tris += [(p, q, s), (p, s, r)]
            else:
                tris += [(p, q, r), (q, s, r)]
    return Mesh.from_triangles(vertices, tris, edge_tagger)


def left_edge_dirichlet(p, q, x0=0.0, tol=1e-12):
    """Edge tagger: edges lying on ``x = x0`` are Dirichlet."""
    on = (np.abs(p[:, 0] - x0) < tol) & (np.abs(q[:, 0] - x0) < tol)
    return np.where(on, DIRICHLET, TRESCA)


def polygon_mesh(n: int, radius=1.0) -> Mesh:
    """Fan triangulation of a regular n-gon inscribed in a circle (all Tresca)."""
    ang = 2 * math.pi * np.arange(n) / n
    vertices = np.concatenate([np.zeros((1, 2)), radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)])
    tris = [(0, 1 + k, 1 + (k + 1) % n) for k in range(n)]
    return Mesh.from_triangles(vertices, tris)
