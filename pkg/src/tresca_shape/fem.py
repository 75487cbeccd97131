"""P1 assembly for 2D isotropic linear elasticity and constrained solves.

Degrees of freedom are interleaved: node ``i`` owns ``2*i`` (x) and ``2*i+1`` (y).
Nodal vector fields are ``(nv, 2)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .mesh import Mesh, signed_areas


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class ConstraintError(ValueError):
    pass


class DataError(ValueError):
    """A data expression could not be evaluated on the mesh."""


# ---------------------------------------------------------------------------
# element geometry


@lru_cache(maxsize=16)
def element_geometry(mesh: Mesh):
    """Areas (nt,) and basis gradients (nt, 3, 2) of the P1 hat functions."""
    v = mesh.vertices
    t = mesh.triangles
    x, y = v[t, 0], v[t, 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    if np.any(area2 <= 0):
        raise AssemblyError(f"degenerate triangle {int(np.argmin(area2))}")
    grads = np.empty((len(t), 3, 2))
    grads[:, 0, 0] = y[:, 1] - y[:, 2]
    grads[:, 1, 0] = y[:, 2] - y[:, 0]
    grads[:, 2, 0] = y[:, 0] - y[:, 1]
    grads[:, 0, 1] = x[:, 2] - x[:, 1]
    grads[:, 1, 1] = x[:, 0] - x[:, 2]
    grads[:, 2, 1] = x[:, 1] - x[:, 0]
    grads /= area2[:, None, None]
    return 0.5 * area2, grads


def element_dofs(mesh: Mesh) -> np.ndarray:
    """(nt, 6) dof indices ordered (a, component)."""
    t = mesh.triangles
    return np.stack([2 * t, 2 * t + 1], axis=2).reshape(len(t), 6)


def _scatter(mesh: Mesh, ke: np.ndarray) -> sp.csr_matrix:
    dofs = element_dofs(mesh)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.nv
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def element_gradients(mesh: Mesh, u) -> np.ndarray:
    """Constant gradient of a P1 field per element, ``G[T, i, k] = d u_i / d x_k``."""
    _, grads = element_geometry(mesh)
    ue = np.asarray(u)[mesh.triangles]  # (nt, 3, 2)
    return np.einsum("tai,tak->tik", ue, grads)


def nodal_gradients(mesh: Mesh, u) -> np.ndarray:
    """Area-weighted average of adjacent element gradients at every node, (nv, 2, 2)."""
    areas, _ = element_geometry(mesh)
    G = element_gradients(mesh, u) * areas[:, None, None]
    acc = np.zeros((mesh.nv, 2, 2))
    wsum = np.zeros(mesh.nv)
    for k in range(3):
        np.add.at(acc, mesh.triangles[:, k], G)
        np.add.at(wsum, mesh.triangles[:, k], areas)
    return acc / wsum[:, None, None]


@lru_cache(maxsize=16)
def nodal_gradient_operator(mesh: Mesh) -> sp.csr_matrix:
    """Sparse map from flattened dofs to flattened averaged nodal gradients (nv*4).

    Row ``4*i + 2*c + k`` is d u_c / d x_k at node i.
    """
    areas, grads = element_geometry(mesh)
    t = mesh.triangles
    wsum = np.zeros(mesh.nv)
    for k in range(3):
        np.add.at(wsum, t[:, k], areas)
    rows, cols, vals = [], [], []
    for node_slot in range(3):
        node = t[:, node_slot]
        for a in range(3):
            for c in range(2):
                for k in range(2):
                    rows.append(4 * node + 2 * c + k)
                    cols.append(2 * t[:, a] + c)
                    vals.append(areas * grads[:, a, k] / wsum[node])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(4 * mesh.nv, 2 * mesh.nv)).tocsr()


# ---------------------------------------------------------------------------
# material law


def stress(grad_u: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """``A e(u) = 2 mu e(u) + lam tr(e(u)) I`` for gradients of shape (..., 2, 2)."""
    e = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
    tr = e[..., 0, 0] + e[..., 1, 1]
    return 2 * mu * e + lam * tr[..., None, None] * np.eye(2)


# ---------------------------------------------------------------------------
# assembly


@dataclass
class SparseSystem:
    """Operator, right-hand side and constraints.

    ``dof_constraints`` maps a dof index to its prescribed value;
    ``dir_constraints`` holds ``(node, unit direction, value)`` meaning
    ``u[node] . direction = value``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray | None = None
    dof_constraints: dict = field(default_factory=dict)
    dir_constraints: list = field(default_factory=list)

    def fix_nodes(self, nodes, value=0.0):
        for n in np.asarray(nodes, dtype=np.int64):
            self.dof_constraints[2 * int(n)] = value
            self.dof_constraints[2 * int(n) + 1] = value
        return self


@lru_cache(maxsize=16)
def assemble_elasticity(mesh: Mesh, mu: float, lam: float) -> sp.csr_matrix:
    """Stiffness for ``int 2 mu e(u):e(v) + lam div(u) div(v)``, exact for P1."""
    if not mu > 0 or lam < 0:
        raise AssemblyError("need mu > 0 and lam >= 0")
    areas, g = element_geometry(mesh)
    eye = np.eye(2)
    gg = np.einsum("tak,tbk->tab", g, g)
    # K[(a,i),(b,j)] = |T| (mu (d_ij ga.gb + ga_j gb_i) + lam ga_i gb_j)
    ke = (
        mu * np.einsum("tab,ij->taibj", gg, eye)
        + mu * np.einsum("taj,tbi->taibj", g, g)
        + lam * np.einsum("tai,tbj->taibj", g, g)
    ) * areas[:, None, None, None, None]
    return _scatter(mesh, ke.reshape(-1, 6, 6))


@lru_cache(maxsize=16)
def assemble_boundary_laplacian(mesh: Mesh) -> sp.csr_matrix:
    """``int_Gamma d_s u . d_s v`` along the boundary polyline, both components."""
    a, b = mesh.boundary_edges[:, 0], mesh.boundary_edges[:, 1]
    inv_len = 1.0 / np.linalg.norm(mesh.vertices[b] - mesh.vertices[a], axis=1)
    rows, cols, vals = [], [], []
    for c in range(2):
        for p, q, sign in ((a, a, 1.0), (b, b, 1.0), (a, b, -1.0), (b, a, -1.0)):
            rows.append(2 * p + c)
            cols.append(2 * q + c)
            vals.append(sign * inv_len)
    n = 2 * mesh.nv
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


@lru_cache(maxsize=16)
def assemble_h1_metric(mesh: Mesh) -> sp.csr_matrix:
    """Full H1 inner product ``int grad u : grad v + u . v``."""
    areas, g = element_geometry(mesh)
    eye = np.eye(2)
    gg = np.einsum("tak,tbk->tab", g, g)
    mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    ke = np.einsum("tab,ij->taibj", gg + mass[None], eye) * areas[:, None, None, None, None]
    return _scatter(mesh, ke.reshape(-1, 6, 6))


def midpoint_quadrature(mesh: Mesh):
    """Edge-midpoint rule (degree 2): points (nt, 3, 2), basis values (3 q, 3 a), weights (nt,)."""
    p = mesh.vertices[mesh.triangles]
    pts = np.stack([0.5 * (p[:, 0] + p[:, 1]), 0.5 * (p[:, 1] + p[:, 2]), 0.5 * (p[:, 2] + p[:, 0])], axis=1)
    phi = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    areas, _ = element_geometry(mesh)
    return pts, phi, areas / 3.0


def evaluate_field(fn, pts) -> np.ndarray:
    try:
        out = np.asarray(fn(pts), dtype=float)
    except (ArithmeticError, ValueError, TypeError) as exc:
        raise DataError(f"cannot evaluate data field: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise DataError("data field is not finite on the mesh")
    return out


@lru_cache(maxsize=16)
def assemble_load(mesh: Mesh, f) -> np.ndarray:
    """Load vector ``int f . phi_i`` with the 3-point midpoint rule."""
    pts, phi, w = midpoint_quadrature(mesh)
    fq = evaluate_field(f, pts.reshape(-1, 2)).reshape(mesh.nt, 3, 2)
    fe = np.einsum("qa,t,tqi->tai", phi, w, fq)
    out = np.zeros((mesh.nv, 2))
    np.add.at(out, mesh.triangles, fe)
    out.setflags(write=False)
    return out.ravel()


def assemble_boundary_load(mesh: Mesh, traction, edge_mask=None) -> np.ndarray:
    """Neumann load ``int_edges t . phi_i`` with 2-point Gauss per boundary edge."""
    e = mesh.boundary_edges if edge_mask is None else mesh.boundary_edges[edge_mask]
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    length = np.linalg.norm(q - p, axis=1)
    out = np.zeros((mesh.nv, 2))
    for xi in (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)):
        x = (1 - xi) * p + xi * q
        tq = evaluate_field(traction, x) * (0.5 * length)[:, None]
        np.add.at(out, e[:, 0], (1 - xi) * tq)
        np.add.at(out, e[:, 1], xi * tq)
    return out.ravel()


# ---------------------------------------------------------------------------
# solving


def pcg(A, b, tol=1e-10, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradient. Returns (x, iterations, relative residual)."""
    n = len(b)
    if max_iter is None:
        max_iter = 10 * n + 100
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    for it in range(1, max_iter + 1):
        if res <= tol:
            return x, it - 1, res
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if res <= tol:
        return x, max_iter, res
    raise SolverError(f"PCG did not reach tol {tol:.1e} in {max_iter} iterations (residual {res:.3e})", res)


def _rotation_transform(n_dof, dir_constraints):
    """Block-diagonal T with u = T w; at a rotated node w[2i] is the component along the direction."""
    rows = list(range(n_dof))
    cols = list(range(n_dof))
    vals = [1.0] * n_dof
    rotated = {}
    for node, d, value in dir_constraints:
        node = int(node)
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        if node in rotated:
            if not np.allclose(rotated[node][0], d, atol=1e-14) or rotated[node][1] != value:
                raise ConstraintError(f"conflicting directional constraints at node {node}")
            continue
        rotated[node] = (d, value)
        i, j = 2 * node, 2 * node + 1
        # columns: (d, d_perp) with d_perp = rot90(d)
        vals[i], vals[j] = 0.0, 0.0
        rows += [i, j, i, j]
        cols += [i, i, j, j]
        vals += [d[0], d[1], -d[1], d[0]]
    T = sp.coo_matrix((vals, (rows, cols)), shape=(n_dof, n_dof)).tocsr()
    T.eliminate_zeros()
    return T, rotated


def solve_constrained(system: SparseSystem, tol=1e-10, max_iter=None, method="cg") -> np.ndarray:
    """Solve ``K u = F`` under componentwise and directional equality constraints.

    Directional constraints rotate the nodal 2x2 block so the constrained
    direction becomes a coordinate, which is then eliminated like any
    prescribed dof.  ``method`` is "cg" (Jacobi PCG) or "dense" (Cholesky).
    Returns the nodal field, shape (nv, 2).
    """
    K = system.matrix
    n = K.shape[0]
    F = np.zeros(n) if system.rhs is None else np.asarray(system.rhs, dtype=float)
    T, rotated = _rotation_transform(n, system.dir_constraints)

    fixed = {}
    for dof, val in system.dof_constraints.items():
        dof = int(dof)
        if dof // 2 in rotated:
            raise ConstraintError(f"dof {dof} has both a componentwise and a directional constraint")
        fixed[dof] = float(val)
    for node, (_, val) in rotated.items():
        fixed[2 * node] = float(val)

    fixed_idx = np.array(sorted(fixed), dtype=np.int64)
    fixed_val = np.array([fixed[i] for i in fixed_idx])
    free = np.setdiff1d(np.arange(n), fixed_idx)

    w = np.zeros(n)
    w[fixed_idx] = fixed_val
    if len(free):
        Kt = (T.T @ K @ T).tocsr() if rotated else K
        Ft = T.T @ F if rotated else F
        Kff = Kt[free][:, free]
        b = Ft[free] - Kt[free][:, fixed_idx] @ fixed_val
        if method == "dense":
            w[free] = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Kff.toarray()), b)
        elif method == "cg":
            w[free], _, _ = pcg(Kff.tocsr(), b, tol=tol, max_iter=max_iter)
        else:
            raise ValueError(f"unknown method {method!r}")
    u = T @ w if rotated else w
    return u.reshape(-1, 2)


def dense_solve(system: SparseSystem) -> np.ndarray:
    return solve_constrained(system, method="dense")


# ---------------------------------------------------------------------------
# traction recovery


@dataclass(frozen=True)
class TractionField:
    """Recovered boundary tractions at the listed boundary nodes."""

    nodes: np.ndarray
    traction: np.ndarray  # (m, 2)
    sigma_n: np.ndarray
    s_tau: np.ndarray


def nodal_residual(K, u, load) -> np.ndarray:
    """``K u - F`` as an (nv, 2) array: the consistent nodal boundary forces."""
    return (K @ np.asarray(u).ravel() - load).reshape(-1, 2)


def boundary_traction(mesh: Mesh, u, mu, lam, volume_load, positions=None) -> TractionField:
    """Variationally consistent tractions ``(K u - F)_i / w_i`` decomposed onto (n, tau).

    ``positions`` selects boundary-loop positions; default is the Tresca nodes.
    """
    K = assemble_elasticity(mesh, mu, lam)
    r = nodal_residual(K, u, volume_load)
    fr = mesh.frame
    pos = mesh.tresca_positions if positions is None else np.asarray(positions)
    nodes = mesh.boundary_nodes[pos]
    t = r[nodes] / fr.weight[pos, None]
    return TractionField(
        nodes,
        t,
        np.sum(t * fr.normal[pos], axis=1),
        np.sum(t * fr.tangent[pos], axis=1),
    )


@lru_cache(maxsize=16)
def recovered_gradient_operator(mesh: Mesh, nodes_key: bytes) -> sp.csr_matrix:
    """Patch-recovered gradients at selected nodes, as a sparse map (4*m x 2*nv).

    For each node a linear polynomial is fitted, by area-weighted least
    squares, to the element gradients sampled at the centroids of the
    triangles within two rings of the node; its value at the node is the
    recovered gradient.  Row layout matches :func:`nodal_gradient_operator`.
    """
    nodes = np.frombuffer(nodes_key, dtype=np.int64)
    areas, grads = element_geometry(mesh)
    t = mesh.triangles
    v = mesh.vertices
    centroids = v[t].mean(axis=1)
    node_tris = sp.csr_matrix(
        (np.ones(3 * len(t)), (t.ravel(), np.repeat(np.arange(len(t)), 3))), shape=(mesh.nv, len(t))
    )
    rows, cols, vals = [], [], []
    for m, node in enumerate(nodes):
        ring1 = node_tris[node].indices
        ring_nodes = np.unique(t[ring1])
        patch = np.unique(node_tris[ring_nodes].indices)
        d = centroids[patch] - v[node]
        A = np.column_stack([np.ones(len(patch)), d])
        W = areas[patch]
        # value at the node = first row of (A^T W A)^-1 A^T W
        coef = np.linalg.solve(A.T @ (W[:, None] * A), (A * W[:, None]).T)[0]
        for a in range(3):
            for c in range(2):
                for k in range(2):
                    rows.append(np.full(len(patch), 4 * m + 2 * c + k))
                    cols.append(2 * t[patch, a] + c)
                    vals.append(coef * grads[patch, a, k])
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(4 * len(nodes), 2 * mesh.nv),
    ).tocsr()


def recovered_gradients(mesh: Mesh, u, nodes) -> np.ndarray:
    """Patch-recovered ``grad u`` at ``nodes``, shape (m, 2, 2)."""
    nodes = np.ascontiguousarray(nodes, dtype=np.int64)
    R = recovered_gradient_operator(mesh, nodes.tobytes())
    return (R @ np.asarray(u, dtype=float).ravel()).reshape(-1, 2, 2)
