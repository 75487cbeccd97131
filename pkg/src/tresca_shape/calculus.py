"""Boundary calculus for nodal direction fields on the Tresca boundary.

Everything here is linear in the nodal field ``theta`` and is exposed both as
sparse operators acting on the flattened dofs (so gradient functionals can be
assembled as vectors) and through :func:`boundary_field_calculus`.

Tangential derivatives ``(grad theta) tau`` are taken along the boundary
polyline: the tangential part is the rate of change of the lumped arc
weight, the normal part the rotation rate of the nodal tangent.  Normal
derivatives use area-averaged element gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .fem import evaluate_field, nodal_gradient_operator
from .mesh import Mesh


def _edges(mesh: Mesh):
    v = mesh.vertices
    d = v[mesh.boundary_edges[:, 1]] - v[mesh.boundary_edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    e = d / length[:, None]
    nu = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return length, e, nu


def _stencil_matrix(mesh: Mesh, coeff_prev, coeff_self, coeff_next, positions):
    """Rows ``positions``: sum of 2-vector coefficients dotted with theta at prev/self/next nodes."""
    bn = mesh.boundary_nodes
    nb = len(bn)
    rows, cols, vals = [], [], []
    for shift, coeff in ((-1, coeff_prev), (0, coeff_self), (1, coeff_next)):
        nodes = bn[(positions + shift) % nb]
        for c in range(2):
            rows.append(np.arange(len(positions)))
            cols.append(2 * nodes + c)
            vals.append(coeff[positions, c])
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(positions), 2 * mesh.nv),
    ).tocsr()


@dataclass(frozen=True)
class BoundaryOperators:
    """Sparse operators (rows = Tresca nodes, columns = flattened dofs)."""

    theta_n: sp.csr_matrix
    theta_tau: sp.csr_matrix
    weight_rate: sp.csr_matrix  # d/dt of the lumped arc weight
    tangent_rate_n: sp.csr_matrix  # (d/dt tau) . n
    grad: tuple  # averaged gradient components, grad[c][k] = d theta_c / d x_k
    weight: np.ndarray

    @property
    def ds_tau(self):
        """Tangential component of the polyline derivative ``(grad theta) tau . tau``."""
        return sp.diags(1.0 / self.weight) @ self.weight_rate

    @property
    def ds_n(self):
        """Normal component ``(grad theta) tau . n``."""
        return self.tangent_rate_n


@lru_cache(maxsize=16)
def boundary_operators(mesh: Mesh) -> BoundaryOperators:
    fr = mesh.frame
    pos = mesh.tresca_positions
    nb = len(mesh.boundary_nodes)
    length, e, nu = _edges(mesh)
    e_prev, nu_prev, len_prev = np.roll(e, 1, axis=0), np.roll(nu, 1, axis=0), np.roll(length, 1)
    zero = np.zeros((nb, 2))

    theta_n = _stencil_matrix(mesh, zero, fr.normal, zero, pos)
    theta_tau = _stencil_matrix(mesh, zero, fr.tangent, zero, pos)

    # w_k = (L_{k-1} + L_k)/2 ; dL/dt = e . (theta_end - theta_start)
    weight_rate = _stencil_matrix(mesh, -0.5 * e_prev, 0.5 * (e_prev - e), 0.5 * e, pos)

    # n = m/|m|, m = nu_{k-1} + nu_k ; d nu/dt = -(nu . d_dot / L) e ; tau_dot . n = -tau . m_dot / |m|
    m_norm = np.linalg.norm(nu + nu_prev, axis=1)
    a_prev = (np.sum(fr.tangent * e_prev, axis=1) / (len_prev * m_norm))[:, None] * nu_prev
    a_next = (np.sum(fr.tangent * e, axis=1) / (length * m_norm))[:, None] * nu
    tangent_rate_n = _stencil_matrix(mesh, -a_prev, a_prev - a_next, a_next, pos)

    G = nodal_gradient_operator(mesh)
    tn = mesh.tresca_nodes
    grad = tuple(tuple(G[4 * tn + 2 * c + k] for k in range(2)) for c in range(2))
    return BoundaryOperators(
        theta_n, theta_tau, weight_rate, tangent_rate_n, grad, fr.weight[pos]
    )


def tresca_frame(mesh: Mesh):
    """(normal, tangent, weight, curvature) restricted to Tresca nodes."""
    fr = mesh.frame
    pos = mesh.tresca_positions
    return fr.normal[pos], fr.tangent[pos], fr.weight[pos], fr.curvature[pos]


def tangent_arc_derivative(mesh: Mesh) -> np.ndarray:
    """Centered arc-length difference of the nodal tangent at Tresca nodes, (nT, 2)."""
    fr = mesh.frame
    pos = mesh.tresca_positions
    length, _, _ = _edges(mesh)
    nb = len(mesh.boundary_nodes)
    span = length[pos] + length[(pos - 1) % nb]
    return (fr.tangent[(pos + 1) % nb] - fr.tangent[(pos - 1) % nb]) / span[:, None]


def scalar_gradient(fn, pts, step) -> np.ndarray:
    """Centered-difference gradient of a scalar field at points (m, 2)."""
    pts = np.asarray(pts, dtype=float)
    out = np.empty_like(pts)
    for k in range(2):
        dx = np.zeros(2)
        dx[k] = step
        out[:, k] = (evaluate_field(fn, pts + dx) - evaluate_field(fn, pts - dx)) / (2 * step)
    return out


def vector_gradient(fn, pts, step) -> np.ndarray:
    """Centered-difference Jacobian ``J[m, i, k] = d f_i / d x_k`` of a vector field."""
    pts = np.asarray(pts, dtype=float)
    out = np.empty(pts.shape[:-1] + (2, 2))
    for k in range(2):
        dx = np.zeros(2)
        dx[k] = step
        out[..., k] = (evaluate_field(fn, pts + dx) - evaluate_field(fn, pts - dx)) / (2 * step)
    return out


def fd_step(mesh: Mesh) -> float:
    return 1e-6 * mesh.diameter


@dataclass(frozen=True)
class BoundaryCalculus:
    """Per-Tresca-node quantities derived from theta (and g)."""

    div_tau: np.ndarray  # div(theta) - (grad theta) n . n
    dtheta_tau_tau: np.ndarray  # (grad theta) tau . tau
    dtheta_tau_n: np.ndarray  # (grad theta) tau . n
    dtau_theta_tau_n: np.ndarray  # (grad tau) theta_tau . n
    theta_n: np.ndarray
    grad_g_theta: np.ndarray
    dn_g: np.ndarray


def averaged_gradient(ops: BoundaryOperators, theta) -> np.ndarray:
    """Averaged ``grad theta`` at Tresca nodes, (nT, 2, 2)."""
    flat = np.asarray(theta, dtype=float).ravel()
    out = np.empty((ops.theta_n.shape[0], 2, 2))
    for c in range(2):
        for k in range(2):
            out[:, c, k] = ops.grad[c][k] @ flat
    return out


def boundary_field_calculus(mesh: Mesh, theta, g) -> BoundaryCalculus:
    ops = boundary_operators(mesh)
    n, tau, _, _ = tresca_frame(mesh)
    flat = np.asarray(theta, dtype=float).ravel()
    gt = averaged_gradient(ops, theta)
    div = gt[:, 0, 0] + gt[:, 1, 1]
    gnn = np.einsum("mi,mik,mk->m", n, gt, n)
    theta_tau = ops.theta_tau @ flat
    dtau = tangent_arc_derivative(mesh)
    pts = mesh.vertices[mesh.tresca_nodes]
    grad_g = scalar_gradient(g, pts, fd_step(mesh))
    theta_nodes = np.asarray(theta, dtype=float)[mesh.tresca_nodes]
    return BoundaryCalculus(
        div_tau=div - gnn,
        dtheta_tau_tau=ops.ds_tau @ flat,
        dtheta_tau_n=ops.ds_n @ flat,
        dtau_theta_tau_n=theta_tau * np.sum(dtau * n, axis=1),
        theta_n=ops.theta_n @ flat,
        grad_g_theta=np.sum(grad_g * theta_nodes, axis=1),
        dn_g=np.sum(grad_g * n, axis=1),
    )
