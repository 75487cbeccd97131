"""Shape gradients of the Tresca energy, descent directions and material derivatives.

At a fixed solution ``u`` every gradient expression is linear in the
direction field ``theta``.  They are therefore assembled once as vectors
(:class:`GradientFunctional`) whose dot product with the flattened ``theta``
gives the gradient value; the per-term vectors are kept for reporting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .calculus import (
    averaged_gradient,
    boundary_field_calculus,
    boundary_operators,
    fd_step,
    scalar_gradient,
    tangent_arc_derivative,
    tresca_frame,
    vector_gradient,
)
from .fem import (
    SparseSystem,
    assemble_elasticity,
    assemble_boundary_laplacian,
    assemble_h1_metric,
    element_geometry,
    element_gradients,
    evaluate_field,
    midpoint_quadrature,
    nodal_gradients,
    nodal_residual,
    recovered_gradients,
    solve_constrained,
    stress,
)
from .mesh import Mesh, deform
from .tresca import ContactState, Mode, ProblemData, energy, problem_load, solve_tresca


class ActiveSetError(RuntimeError):
    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)


# ---------------------------------------------------------------------------
# linear functionals of theta


@dataclass
class GradientFunctional:
    """``theta -> vector . theta.ravel()`` with a named additive breakdown."""

    terms: dict

    @property
    def vector(self) -> np.ndarray:
        return sum(self.terms.values())

    def __call__(self, theta) -> float:
        return float(self.vector @ np.asarray(theta, dtype=float).ravel())

    def breakdown(self, theta) -> dict:
        flat = np.asarray(theta, dtype=float).ravel()
        return {name: float(vec @ flat) for name, vec in self.terms.items()}

    def __add__(self, other: "GradientFunctional") -> "GradientFunctional":
        terms = dict(self.terms)
        for name, vec in other.terms.items():
            terms[name] = terms.get(name, 0.0) + vec
        return GradientFunctional(terms)

    def scaled(self, factor: float) -> "GradientFunctional":
        return GradientFunctional({k: factor * v for k, v in self.terms.items()})


def _scatter_elements(mesh: Mesh, ve: np.ndarray) -> np.ndarray:
    """Sum element contributions ``ve[T, a, i]`` into a flat nodal vector."""
    out = np.zeros((mesh.nv, 2))
    np.add.at(out, mesh.triangles, ve)
    return out.ravel()


def _nodal_to_flat(mesh: Mesh, nodes, values) -> np.ndarray:
    out = np.zeros((mesh.nv, 2))
    np.add.at(out, nodes, values)
    return out.ravel()


@dataclass(frozen=True)
class _Fields:
    """Solution-derived quantities shared by the gradient forms."""

    grad_u: np.ndarray  # element gradients (nt, 2, 2)
    sigma: np.ndarray  # element stresses
    areas: np.ndarray
    basis_grads: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    weight: np.ndarray
    curvature: np.ndarray
    u_n: np.ndarray
    u_tau: np.ndarray
    s_tau: np.ndarray
    sigma_n: np.ndarray
    g: np.ndarray
    slip: np.ndarray
    residual: np.ndarray  # (nv, 2)


def _fields(mesh: Mesh, pd: ProblemData, u, state: ContactState) -> _Fields:
    u = np.asarray(u, dtype=float)
    areas, bg = element_geometry(mesh)
    gu = element_gradients(mesh, u)
    n, tau, w, H = tresca_frame(mesh)
    tn = mesh.tresca_nodes
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    return _Fields(
        grad_u=gu,
        sigma=stress(gu, pd.mu, pd.lam),
        areas=areas,
        basis_grads=bg,
        normal=n,
        tangent=tau,
        weight=w,
        curvature=H,
        u_n=np.sum(u[tn] * n, axis=1),
        u_tau=np.sum(u[tn] * tau, axis=1),
        s_tau=np.asarray(state.s_tau),
        sigma_n=np.asarray(state.sigma_n),
        g=np.asarray(state.g),
        slip=np.asarray(state.mode) == Mode.SLIP,
        residual=nodal_residual(K, u, problem_load(mesh, pd)),
    )


def traction_consistent_gradients(mesh: Mesh, pd: ProblemData, u, s_tau, sigma_n) -> np.ndarray:
    """Displacement gradients at Tresca nodes from boundary data alone.

    The tangential derivative comes from centered differences of the nodal
    values along the boundary; the normal derivative is then the unique
    vector for which the stress vector ``A e(u) n`` equals the recovered
    traction ``sigma_n n + s_tau tau``.
    """
    u = np.asarray(u, dtype=float)
    bn = mesh.boundary_nodes
    nb = len(bn)
    pos = mesh.tresca_positions
    n, tau, _, _ = tresca_frame(mesh)
    v = mesh.vertices
    span = np.linalg.norm(v[bn[(pos + 1) % nb]] - v[bn[pos]], axis=1) + np.linalg.norm(
        v[bn[pos]] - v[bn[(pos - 1) % nb]], axis=1
    )
    b = (u[bn[(pos + 1) % nb]] - u[bn[(pos - 1) % nb]]) / span[:, None]
    b_n = np.sum(b * n, axis=1)
    b_t = np.sum(b * tau, axis=1)
    a_n = (np.asarray(sigma_n) - pd.lam * b_t) / (2 * pd.mu + pd.lam)
    a_t = np.asarray(s_tau) / pd.mu - b_n
    a = a_n[:, None] * n + a_t[:, None] * tau
    return a[:, :, None] * n[:, None, :] + b[:, :, None] * tau[:, None, :]


def boundary_gradient_functional(mesh: Mesh, pd: ProblemData, u, state: ContactState, recovery="traction") -> GradientFunctional:
    """Boundary-integral form with curvature and normal derivatives, lumped at Tresca nodes."""
    u = np.asarray(u, dtype=float)
    F = _fields(mesh, pd, u, state)
    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    n, tau, w = F.normal, F.tangent, F.weight

    if recovery == "traction":
        gu = traction_consistent_gradients(mesh, pd, u, F.s_tau, F.sigma_n)
    elif recovery == "patch":
        gu = recovered_gradients(mesh, u, tn)
    else:
        gu = nodal_gradients(mesh, u)[tn]
    sig = stress(gu, pd.mu, pd.lam)
    strain = 0.5 * (gu + np.swapaxes(gu, 1, 2))
    density = 0.5 * np.sum(sig * strain, axis=(1, 2))
    pts = mesh.vertices[tn]
    f_dot_u = np.sum(evaluate_field(pd.f, pts) * u[tn], axis=1)
    dn_u_tau = np.einsum("mi,mik,mk->m", tau, gu, n)
    dn_g = np.sum(scalar_gradient(pd.g, pts, fd_step(mesh)) * n, axis=1)
    slip_mag = np.where(F.slip, np.abs(F.u_tau), 0.0)
    tangent_turn = np.sum(tangent_arc_derivative(mesh) * n, axis=1)
    rot = w * F.u_n * F.s_tau

    to_normal = ops.theta_n.T
    return GradientFunctional(
        {
            "strain_energy": to_normal @ (w * density),
            "load": to_normal @ (-w * f_dot_u),
            "shear_normal_derivative": to_normal @ (-w * F.s_tau * dn_u_tau),
            "curvature_friction": to_normal @ (w * slip_mag * (F.curvature * F.g + dn_g)),
            "tangential_rotation": ops.theta_tau.T @ (rot * tangent_turn) - ops.ds_n.T @ rot,
        }
    )


def _stiffness_rate_terms(mesh: Mesh, F: _Fields):
    """Vectors of ``theta -> int div(theta) A e(u):e(u)/2`` and ``theta -> -int A e(u) : grad(u) grad(theta)``."""
    half_density = 0.5 * np.sum(F.sigma * F.grad_u, axis=(1, 2))
    div_part = (F.areas * half_density)[:, None, None] * F.basis_grads
    # sigma : (grad_u grad_theta) = (grad_u^T sigma) : grad_theta
    m = np.einsum("tji,tjk->tik", F.grad_u, F.sigma)
    work_part = -F.areas[:, None, None] * np.einsum("tik,tak->tai", m, F.basis_grads)
    return _scatter_elements(mesh, div_part), _scatter_elements(mesh, work_part)


def _quadrature_data(mesh: Mesh, pd: ProblemData, u):
    pts, phi, qw = midpoint_quadrature(mesh)
    fq = evaluate_field(pd.f, pts.reshape(-1, 2)).reshape(mesh.nt, 3, 2)
    uq = np.einsum("qa,tai->tqi", phi, np.asarray(u)[mesh.triangles])
    return pts, phi, qw, fq, uq


def volume_gradient_functional(mesh: Mesh, pd: ProblemData, u, state: ContactState) -> GradientFunctional:
    """Volume (domain-integral) form, using residual tractions for the boundary pairing."""
    u = np.asarray(u, dtype=float)
    F = _fields(mesh, pd, u, state)
    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    n, tau, w = F.normal, F.tangent, F.weight

    div_energy, stress_work = _stiffness_rate_terms(mesh, F)

    # int f . grad(u) theta with theta interpolated at the quadrature points
    pts, phi, qw, fq, _ = _quadrature_data(mesh, pd, u)
    gtf = np.einsum("tji,tqj->tqi", F.grad_u, fq)  # grad_u^T f
    load_transport = _scatter_elements(mesh, np.einsum("t,qa,tqi->tai", qw, phi, gtf))

    f_dot_u = np.sum(evaluate_field(pd.f, mesh.vertices[tn]) * u[tn], axis=1)
    boundary_load = ops.theta_n.T @ (-w * f_dot_u)

    # pairing of recovered tractions with grad(theta)^T u: u . (grad theta) t per node
    r = F.residual[tn]
    r_tau = np.sum(r * tau, axis=1)
    r_n = np.sum(r * n, axis=1)
    # tangential part uses the polyline derivative (grad theta) tau = (w_dot/w) tau + (tau_dot . n) n
    pairing = -(ops.ds_tau.T @ (r_tau * F.u_tau) + ops.ds_n.T @ (r_tau * F.u_n))
    # normal part: u . (grad theta) n with averaged gradients
    coef = np.zeros(2 * mesh.nv)
    for c in range(2):
        for k in range(2):
            coef += ops.grad[c][k].T @ (r_n * u[tn, c] * n[:, k])
    pairing = pairing - coef

    # slip term int_N p(theta) |u_tau|
    slip_w = np.where(F.slip, np.abs(F.u_tau), 0.0) * w
    grad_g = scalar_gradient(pd.g, mesh.vertices[tn], fd_step(mesh))
    friction = _nodal_to_flat(mesh, tn, slip_w[:, None] * grad_g)
    gw = slip_w * F.g
    div_tau = sum(ops.grad[k][k] for k in range(2))
    for c in range(2):
        for k in range(2):
            div_tau = div_tau - sp.diags(n[:, c] * n[:, k]) @ ops.grad[c][k]
    friction = friction + div_tau.T @ gw - ops.ds_tau.T @ gw

    return GradientFunctional(
        {
            "divergence_energy": div_energy,
            "load_transport": load_transport,
            "stress_work": stress_work,
            "boundary_load": boundary_load,
            "traction_pairing": pairing,
            "slip_friction": friction,
        }
    )


def _load_rate_vectors(mesh: Mesh, pd: ProblemData):
    """Per-element data for the derivative of the discrete load under vertex motion."""
    pts, phi, qw, fq, _ = _quadrature_data(mesh, pd, np.zeros((mesh.nv, 2)))
    jac = vector_gradient(pd.f, pts, fd_step(mesh))  # (nt, 3, 2, 2)
    return pts, phi, qw, fq, jac


def discrete_gradient_functional(mesh: Mesh, pd: ProblemData, u, state: ContactState) -> GradientFunctional:
    """Exact derivative of the discrete minimal energy under vertex motion.

    Differentiates every ingredient of the discrete problem (element
    stiffness, quadrature load, lumped weights, nodal tangents, threshold
    values) at the converged solution.
    """
    u = np.asarray(u, dtype=float)
    F = _fields(mesh, pd, u, state)
    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    div_energy, stress_work = _stiffness_rate_terms(mesh, F)

    _, phi, qw, fq, jac = _load_rate_vectors(mesh, pd)
    uq = np.einsum("qa,tai->tqi", phi, u[mesh.triangles])
    fu = np.sum(fq * uq, axis=2)  # (nt, 3)
    div_part = np.einsum("t,tq,tai->tai", qw, fu, F.basis_grads)
    transport = np.einsum("t,qa,tqji,tqj->tai", qw, phi, jac, uq)
    load_rate = -_scatter_elements(mesh, div_part + transport)

    slip_mag = np.where(F.slip, np.abs(F.u_tau), 0.0)
    grad_g = scalar_gradient(pd.g, mesh.vertices[tn], fd_step(mesh))
    threshold_rate = _nodal_to_flat(mesh, tn, (slip_mag * F.weight)[:, None] * grad_g)
    weight_rate = ops.weight_rate.T @ (F.g * slip_mag)
    tangent_rate = -ops.tangent_rate_n.T @ (F.weight * F.s_tau * F.u_n)
    return GradientFunctional(
        {
            "divergence_energy": div_energy,
            "stress_work": stress_work,
            "load_rate": load_rate,
            "threshold_rate": threshold_rate,
            "weight_rate": weight_rate,
            "tangent_rate": tangent_rate,
        }
    )


def shape_gradient_boundary(mesh, pd, u0, state, theta) -> float:
    return boundary_gradient_functional(mesh, pd, u0, state)(theta)


def shape_gradient_volume(mesh, pd, u0, state, theta) -> float:
    return volume_gradient_functional(mesh, pd, u0, state)(theta)


GRADIENT_FORMS = {
    "boundary": boundary_gradient_functional,
    "volume": volume_gradient_functional,
    "discrete": discrete_gradient_functional,
}


# ---------------------------------------------------------------------------
# pointwise derivative data


def p_theta(mesh: Mesh, g, theta) -> np.ndarray:
    """``grad g . theta + g (div_tau theta - (grad theta) tau . tau)`` at Tresca nodes."""
    bc = boundary_field_calculus(mesh, theta, g)
    gv = evaluate_field(g, mesh.vertices[mesh.tresca_nodes])
    return bc.grad_g_theta + gv * (bc.div_tau - bc.dtheta_tau_tau)


def xi_m(mesh: Mesh, u0, theta, mu: float, lam: float) -> np.ndarray:
    """``(A e(u) grad(theta)^T + A(grad(u) grad(theta)) + (grad(theta) - div(theta) I) A e(u)) n`` at Tresca nodes."""
    tn = mesh.tresca_nodes
    n, _, _, _ = tresca_frame(mesh)
    gu = nodal_gradients(mesh, u0)[tn]
    gt = nodal_gradients(mesh, theta)[tn]
    sig = stress(gu, mu, lam)
    div = gt[:, 0, 0] + gt[:, 1, 1]
    mat = (
        sig @ np.swapaxes(gt, 1, 2)
        + stress(gu @ gt, mu, lam)
        + (gt - div[:, None, None] * np.eye(2)) @ sig
    )
    return np.einsum("mik,mk->mi", mat, n)


@dataclass(frozen=True)
class DerivativeData:
    p: np.ndarray
    xi_m: np.ndarray
    constraint_offset: np.ndarray  # u . (grad theta) tau
    slip_direction: np.ndarray  # on N nodes, zero elsewhere
    multiplier_direction: np.ndarray  # s_tau / g on S nodes, zero elsewhere


def derivative_data(mesh: Mesh, pd: ProblemData, u0, state: ContactState, theta) -> DerivativeData:
    u0 = np.asarray(u0, dtype=float)
    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    n, tau, _, _ = tresca_frame(mesh)
    flat = np.asarray(theta, dtype=float).ravel()
    u_tau = np.sum(u0[tn] * tau, axis=1)
    u_n = np.sum(u0[tn] * n, axis=1)
    offset = u_tau * (ops.ds_tau @ flat) + u_n * (ops.ds_n @ flat)
    mode = np.asarray(state.mode)
    slip_dir = np.where((mode == Mode.SLIP)[:, None], np.sign(u_tau)[:, None] * tau, 0.0)
    mult_dir = np.where((mode == Mode.STICK_BOUNDARY)[:, None], (state.s_tau / state.g)[:, None] * tau, 0.0)
    return DerivativeData(
        p=p_theta(mesh, pd.g, theta),
        xi_m=xi_m(mesh, u0, theta, pd.mu, pd.lam),
        constraint_offset=offset,
        slip_direction=slip_dir,
        multiplier_direction=mult_dir,
    )


# ---------------------------------------------------------------------------
# descent direction


def _free_dofs(mesh: Mesh) -> np.ndarray:
    free = np.ones(mesh.nv, dtype=bool)
    free[mesh.dirichlet_nodes] = False
    return np.flatnonzero(np.repeat(free, 2))


def functional_vector(mesh: Mesh, functional) -> np.ndarray:
    """Flat representation of a linear functional; callables are probed on basis fields."""
    if isinstance(functional, GradientFunctional):
        return np.asarray(functional.vector, dtype=float)
    vec = np.zeros(2 * mesh.nv)
    basis = np.zeros(2 * mesh.nv)
    for dof in _free_dofs(mesh):
        basis[dof] = 1.0
        vec[dof] = functional(basis.reshape(-1, 2))
        basis[dof] = 0.0
    return vec


def descent_direction(
    mesh: Mesh,
    functional,
    tol: float = 1e-12,
    normal_only: bool = False,
    boundary_smoothing: float = 0.0,
    taper=None,
) -> np.ndarray:
    """H1 Riesz representative of ``-functional`` among fields vanishing on Dirichlet nodes.

    Optional regularizations, each of which keeps ``functional(theta) < 0``:

    * ``normal_only``: restrict to ``theta . tau = 0`` at Tresca nodes, so
      boundary nodes do not slide along the curve;
    * ``boundary_smoothing``: add ``beta int_Gamma d_s theta . d_s theta`` to
      the metric, damping node-to-node oscillation of the boundary;
    * ``taper``: nodal weights ``chi``; returns ``chi psi`` where ``psi`` is
      the representative of the weighted functional ``chi G``, so that
      ``G . theta = -|psi|^2`` in the metric.
    """
    rhs = -functional_vector(mesh, functional)
    metric = assemble_h1_metric(mesh)
    if boundary_smoothing:
        metric = metric + boundary_smoothing * assemble_boundary_laplacian(mesh)
    fixed = mesh.dirichlet_nodes
    if taper is not None:
        chi = np.asarray(taper, dtype=float)
        rhs = np.repeat(chi, 2) * rhs
        fixed = np.union1d(fixed, np.flatnonzero(chi == 0.0))
    system = SparseSystem(metric, rhs).fix_nodes(fixed)
    if normal_only:
        _, tau, _, _ = tresca_frame(mesh)
        fixed_set = set(fixed.tolist())
        system.dir_constraints.extend(
            (int(i), t, 0.0) for i, t in zip(mesh.tresca_nodes, tau) if int(i) not in fixed_set
        )
    psi = solve_constrained(system, tol=tol)
    return psi if taper is None else psi * chi[:, None]


def h1_norm(mesh: Mesh, theta) -> float:
    flat = np.asarray(theta, dtype=float).ravel()
    return float(np.sqrt(flat @ (assemble_h1_metric(mesh) @ flat)))


# ---------------------------------------------------------------------------
# material and shape derivatives


def _stiffness_rate_vector(mesh: Mesh, pd: ProblemData, u, theta) -> np.ndarray:
    """``K' u`` for the vertex velocity ``theta``."""
    areas, bg = element_geometry(mesh)
    gu = element_gradients(mesh, u)
    gt = element_gradients(mesh, theta)
    sig = stress(gu, pd.mu, pd.lam)
    div = gt[:, 0, 0] + gt[:, 1, 1]
    mat = div[:, None, None] * sig - sig @ np.swapaxes(gt, 1, 2) - stress(gu @ gt, pd.mu, pd.lam)
    ve = areas[:, None, None] * np.einsum("tik,tak->tai", mat, bg)
    return _scatter_elements(mesh, ve)


def _load_rate_vector(mesh: Mesh, pd: ProblemData, theta) -> np.ndarray:
    """``F'`` for the vertex velocity ``theta``."""
    _, phi, qw, fq, jac = _load_rate_vectors(mesh, pd)
    gt = element_gradients(mesh, theta)
    div = gt[:, 0, 0] + gt[:, 1, 1]
    tq = np.einsum("qa,tai->tqi", phi, np.asarray(theta)[mesh.triangles])
    rate = div[:, None, None] * fq + np.einsum("tqik,tqk->tqi", jac, tq)
    return _scatter_elements(mesh, np.einsum("t,qa,tqi->tai", qw, phi, rate))


@dataclass(frozen=True)
class MaterialDerivative:
    u_dot: np.ndarray  # (nv, 2)
    iterations: int
    boundary_stick: np.ndarray  # final mode of each S node: True = constrained


def solve_material_derivative(
    mesh: Mesh, pd: ProblemData, u0, state: ContactState, theta, max_iter: int = 50
) -> MaterialDerivative:
    """Derivative of the nodal solution along the vertex velocity ``theta``.

    Linearizes the discrete friction problem at the converged partition:
    slipping nodes carry the rate of their friction force, strictly sticking
    nodes keep ``u . tau`` at zero as the tangent rotates, and boundary
    sticking nodes choose between the two by an active-set loop on the sign
    conditions.
    """
    u0 = np.asarray(u0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    n, tau, w, _ = tresca_frame(mesh)
    flat = theta.ravel()
    mode = np.asarray(state.mode)
    g = np.asarray(state.g)
    s_tau = np.asarray(state.s_tau)

    grad_g = scalar_gradient(pd.g, mesh.vertices[tn], fd_step(mesh))
    gw_rate = np.sum(grad_g * theta[tn], axis=1) * w + g * (ops.weight_rate @ flat)
    tau_rate = (ops.tangent_rate_n @ flat)[:, None] * n
    u_n = np.sum(u0[tn] * n, axis=1)
    offset = -u_n * (ops.tangent_rate_n @ flat)  # required value of u_dot . tau on sticking nodes
    mu_t = w * s_tau  # tangential nodal force

    base = (-_stiffness_rate_vector(mesh, pd, u0, theta) + _load_rate_vector(mesh, pd, theta)).reshape(-1, 2)
    base_t = base.copy()
    # every Tresca node carries the rotation of its current tangential force
    np.add.at(base_t, tn, mu_t[:, None] * tau_rate)

    slip = mode == Mode.SLIP
    sgn = np.asarray(state.sign, dtype=float)
    boundary_nodes = np.flatnonzero(mode == Mode.STICK_BOUNDARY)
    sigma = np.sign(s_tau)
    stick_b = np.ones(len(boundary_nodes), dtype=bool)
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    trace = []

    for it in range(1, max_iter + 1):
        rhs = base_t.copy()
        # slipping nodes: force -g w s tau, its rate enters the load
        np.add.at(rhs, tn[slip], -(sgn[slip] * gw_rate[slip])[:, None] * tau[slip])
        b_slip = boundary_nodes[~stick_b]
        np.add.at(rhs, tn[b_slip], (sigma[b_slip] * gw_rate[b_slip])[:, None] * tau[b_slip])

        constrained = ~slip
        constrained[boundary_nodes[~stick_b]] = False
        system = SparseSystem(K, rhs.ravel()).fix_nodes(mesh.dirichlet_nodes)
        system.dir_constraints = [
            (tn[j], tau[j], offset[j]) for j in np.flatnonzero(constrained)
        ]
        ud = solve_constrained(system, tol=pd.linear_tol)
        if len(boundary_nodes) == 0:
            return MaterialDerivative(ud, it, stick_b)

        reaction = (K @ ud.ravel() - rhs.ravel()).reshape(-1, 2)[tn]
        force_rate = np.sum(reaction * tau, axis=1)
        slip_rate = np.sum(ud[tn] * tau, axis=1) - offset
        change = False
        new = stick_b.copy()
        for k, j in enumerate(boundary_nodes):
            if stick_b[k] and sigma[j] * force_rate[j] > gw_rate[j] + 1e-12 * max(abs(gw_rate[j]), g[j] * w[j]):
                new[k] = False
                change = True
            elif not stick_b[k] and sigma[j] * slip_rate[j] > 1e-12 * max(np.max(np.abs(ud)), 1e-300):
                new[k] = True
                change = True
        trace.append(new.copy())
        if not change:
            return MaterialDerivative(ud, it, stick_b)
        stick_b = new
    raise ActiveSetError(f"material derivative active set did not settle in {max_iter} iterations", trace)


@dataclass(frozen=True)
class ShapeDerivative:
    u_prime: np.ndarray  # (nv, 2)
    w_field: np.ndarray  # -grad(theta)^T u - grad(u) theta, averaged gradients, (nv, 2)
    w_tau: np.ndarray  # W . tau at Tresca nodes, with the boundary tangential derivative


def shape_derivative(mesh: Mesh, u0, ubar_prime, theta) -> ShapeDerivative:
    """``u' = ubar' - grad(u) theta`` together with ``W(theta)``."""
    u0 = np.asarray(u0, dtype=float)
    theta = np.asarray(theta, dtype=float)
    gu = nodal_gradients(mesh, u0)
    gt = nodal_gradients(mesh, theta)
    transport = np.einsum("vik,vk->vi", gu, theta)
    u_prime = np.asarray(ubar_prime, dtype=float) - transport
    w_field = -np.einsum("vki,vk->vi", gt, u0) - transport

    ops = boundary_operators(mesh)
    tn = mesh.tresca_nodes
    n, tau, _, _ = tresca_frame(mesh)
    flat = theta.ravel()
    u_tau = np.sum(u0[tn] * tau, axis=1)
    u_n = np.sum(u0[tn] * n, axis=1)
    w_tau = -(u_tau * (ops.ds_tau @ flat) + u_n * (ops.ds_n @ flat)) - np.sum(transport[tn] * tau, axis=1)
    return ShapeDerivative(u_prime, w_field, w_tau)


# ---------------------------------------------------------------------------
# reports and finite-difference checks


@dataclass
class ShapeGradientReport:
    value_boundary: float
    value_volume: float
    terms: dict
    theta_norm_h1: float
    flags: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "value_boundary": self.value_boundary,
                "value_volume": self.value_volume,
                "terms": self.terms,
                "theta_norm_h1": self.theta_norm_h1,
            },
            indent=2,
            sort_keys=False,
        )


def shape_gradient_report(mesh: Mesh, pd: ProblemData, u0, state: ContactState, theta) -> ShapeGradientReport:
    bf = boundary_gradient_functional(mesh, pd, u0, state)
    vf = volume_gradient_functional(mesh, pd, u0, state)
    bterms = bf.breakdown(theta)
    vterms = vf.breakdown(theta)
    terms = {f"boundary.{k}": v for k, v in bterms.items()}
    terms.update({f"volume.{k}": v for k, v in vterms.items()})
    flags = []
    # junction nodes: Tresca nodes adjacent to a Dirichlet node along the loop
    tags = mesh.node_tags
    pos = mesh.tresca_positions
    nb = len(tags)
    junction = (tags[(pos - 1) % nb] != tags[pos]) | (tags[(pos + 1) % nb] != tags[pos])
    if np.any(junction):
        flags.append(f"{int(junction.sum())} Tresca nodes border the Dirichlet part")
    if np.any(np.asarray(state.mode) == Mode.STICK_BOUNDARY):
        flags.append("boundary-stick nodes present (classification band)")
    return ShapeGradientReport(
        value_boundary=float(sum(bterms.values())),
        value_volume=float(sum(vterms.values())),
        terms=terms,
        theta_norm_h1=h1_norm(mesh, theta),
        flags=flags,
    )


@dataclass(frozen=True)
class FDRow:
    t: float
    quotient: float
    boundary: float
    volume: float

    @property
    def rel_error_boundary(self) -> float:
        return abs(self.quotient - self.boundary) / max(abs(self.boundary), 1e-300)

    @property
    def rel_error_volume(self) -> float:
        return abs(self.quotient - self.volume) / max(abs(self.volume), 1e-300)


def fd_gradient_check(mesh: Mesh, pd: ProblemData, theta, t_list, u0=None, state=None) -> list[FDRow]:
    """Finite-difference quotients of the minimal energy along ``theta`` against both gradient forms."""
    if u0 is None or state is None:
        u0, state = solve_tresca(mesh, pd)
    j0 = energy(mesh, pd, u0)
    b = shape_gradient_boundary(mesh, pd, u0, state, theta)
    v = shape_gradient_volume(mesh, pd, u0, state, theta)
    rows = []
    for t in sorted(t_list, reverse=True):
        mt = deform(mesh, theta, t)
        ut, _ = solve_tresca(mt, pd, warm_start=state)
        rows.append(FDRow(float(t), (energy(mt, pd, ut) - j0) / t, b, v))
    return rows


def dirichlet_taper(mesh: Mesh, inner: float, outer: float) -> np.ndarray:
    """Nodal cutoff in [0, 1]: quintic smoothstep of the distance to the nearest Dirichlet node.

    Zero for ``d <= inner * diameter``, one for ``d >= outer * diameter`` and
    exactly zero on Dirichlet nodes.  All ones when there is no Dirichlet part.
    """
    dn = mesh.dirichlet_nodes
    if not len(dn):
        return np.ones(mesh.nv)
    d, _ = cKDTree(mesh.vertices[dn]).query(mesh.vertices)
    s = np.clip((d / mesh.diameter - inner) / (outer - inner), 0.0, 1.0)
    chi = s**3 * (10 - 15 * s + 6 * s * s)
    chi[dn] = 0.0
    return chi


def smooth_direction(mesh: Mesh, seed: int, modes: int = 4, inner: float = 0.045, outer: float = 0.23) -> np.ndarray:
    """Seeded smooth field that vanishes near the Dirichlet part.

    A random sum of low-frequency Fourier modes is multiplied by
    :func:`dirichlet_taper` and scaled to a largest nodal norm of one.
    """
    rng = np.random.default_rng(seed)
    x = mesh.vertices
    scale = mesh.diameter
    field_ = np.zeros_like(x)
    for _ in range(modes):
        k = rng.normal(size=2) * 2.0 / scale
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(size=2)
        field_ += amp[None, :] * np.cos(x @ k + phase)[:, None]
    field_ *= dirichlet_taper(mesh, inner, outer)[:, None]
    peak = np.max(np.linalg.norm(field_, axis=1))
    return field_ / peak if peak > 0 else field_
