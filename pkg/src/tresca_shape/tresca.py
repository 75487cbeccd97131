"""Tresca friction problem: switching (active-set) solver, energy, and oracles.

The discrete problem minimizes

    E(u) = 1/2 u.K u - F.u + sum_i g_i w_i |u_i . tau_i|

over nodal fields vanishing on the Dirichlet nodes, the sum running over
Tresca nodes with lumped arc weights ``w_i``.  The switching loop solves this
exactly (up to linear-solver tolerance) by guessing which nodes stick.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .calculus import tresca_frame
from .fem import (
    DataError,
    SparseSystem,
    assemble_elasticity,
    assemble_load,
    evaluate_field,
    nodal_residual,
    solve_constrained,
)
from .mesh import Mesh


class Mode(enum.IntEnum):
    STICK_STRICT = 0
    STICK_BOUNDARY = 1
    SLIP = 2


class SwitchingError(RuntimeError):
    """The switching loop did not settle; ``history`` lists the visited partitions."""

    def __init__(self, message, history):
        self.history = history
        super().__init__(message)


@dataclass(frozen=True)
class ProblemData:
    f: object  # callable (m, 2) -> (m, 2)
    g: object  # callable (m, 2) -> (m,)
    mu: float = 0.5
    lam: float = 0.0
    linear_tol: float = 1e-12
    switch_tol: float = 1e-10
    eps_slip: float = 1e-6
    max_switch: int = 200

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.eps_slip > 0:
            raise ValueError("eps_slip must be positive")

    def with_g_scaled(self, factor: float) -> "ProblemData":
        g = self.g
        return replace(self, g=lambda p: factor * g(p))


@dataclass(frozen=True)
class ContactState:
    """Per-Tresca-node snapshot, in boundary-loop order of the Tresca nodes."""

    nodes: np.ndarray
    mode: np.ndarray  # Mode values
    sign: np.ndarray  # +-1; on SLIP nodes u.tau = sign |u.tau|
    sigma_n: np.ndarray
    s_tau: np.ndarray
    g: np.ndarray
    u_tau: np.ndarray
    switches: int = 0
    history: tuple = field(default=(), repr=False)

    @property
    def slip(self) -> np.ndarray:
        return self.mode == Mode.SLIP


@dataclass(frozen=True)
class Partition:
    """Index lists (into ``ContactState.nodes``) of slipping, strictly sticking and boundary-sticking nodes."""

    N: np.ndarray
    D: np.ndarray
    S: np.ndarray


def problem_load(mesh: Mesh, pd: ProblemData) -> np.ndarray:
    return assemble_load(mesh, pd.f)


def threshold_values(mesh: Mesh, pd: ProblemData) -> np.ndarray:
    g = evaluate_field(pd.g, mesh.vertices[mesh.tresca_nodes])
    if np.any(g <= 0):
        raise DataError("friction threshold g must be positive on the Tresca boundary")
    return g


def _base_system(mesh: Mesh, pd: ProblemData, load) -> SparseSystem:
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    return SparseSystem(K, np.array(load, dtype=float)).fix_nodes(mesh.dirichlet_nodes)


def solve_dirichlet_neumann(mesh: Mesh, pd: ProblemData) -> np.ndarray:
    """u = 0 on the Dirichlet part, traction free elsewhere."""
    system = _base_system(mesh, pd, problem_load(mesh, pd))
    return solve_constrained(system, tol=pd.linear_tol)


def solve_stick(mesh: Mesh, pd: ProblemData) -> np.ndarray:
    """Tangentially clamped problem: u . tau = 0 on every Tresca node."""
    _, tau, _, _ = tresca_frame(mesh)
    system = _base_system(mesh, pd, problem_load(mesh, pd))
    system.dir_constraints = [(i, t, 0.0) for i, t in zip(mesh.tresca_nodes, tau)]
    return solve_constrained(system, tol=pd.linear_tol)


def _solve_partition(mesh, pd, load, stick, sign, gw):
    _, tau, _, _ = tresca_frame(mesh)
    tn = mesh.tresca_nodes
    rhs = np.array(load, dtype=float).reshape(-1, 2)
    slip = ~stick
    rhs[tn[slip]] -= (gw[slip] * sign[slip])[:, None] * tau[slip]
    system = _base_system(mesh, pd, rhs.ravel())
    system.dir_constraints = [(i, t, 0.0) for i, t in zip(tn[stick], tau[stick])]
    return solve_constrained(system, tol=pd.linear_tol)


def _tractions(mesh, pd, u, load):
    n, tau, w, _ = tresca_frame(mesh)
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    t = nodal_residual(K, u, load)[mesh.tresca_nodes] / w[:, None]
    return np.sum(t * n, axis=1), np.sum(t * tau, axis=1)


def solve_tresca(mesh: Mesh, pd: ProblemData, warm_start: ContactState | None = None):
    """Switching solver. Returns ``(u, ContactState)`` with ``u`` of shape (nv, 2)."""
    _, tau, w, _ = tresca_frame(mesh)
    tn = mesh.tresca_nodes
    g = threshold_values(mesh, pd)
    gw = g * w
    load = problem_load(mesh, pd)

    if warm_start is not None:
        if len(warm_start.nodes) != len(tn):
            raise ValueError("warm start does not match the Tresca node count")
        stick = warm_start.mode != Mode.SLIP
        sign = np.asarray(warm_start.sign, dtype=float).copy()
    else:
        stick = np.ones(len(tn), dtype=bool)
        sign = np.ones(len(tn))

    def key(st, sg):
        return st.tobytes() + np.where(st, 0, sg).astype(np.int8).tobytes()

    visited = {key(stick, sign)}
    history = [(stick.copy(), sign.copy())]
    switches = 0
    while True:
        u = _solve_partition(mesh, pd, load, stick, sign, gw)
        sigma_n, s_tau = _tractions(mesh, pd, u, load)
        u_tau = np.sum(u[tn] * tau, axis=1)

        # violations, scaled to be comparable across the two kinds
        stick_viol = np.where(stick, np.abs(s_tau) / g - (1 + pd.switch_tol), -np.inf)
        u_scale = max(np.max(np.abs(u_tau), initial=0.0), 1e-300)
        slip_viol = np.where(~stick, -sign * u_tau / u_scale, -np.inf)
        slip_viol = np.where(slip_viol > 1e-13, slip_viol, -np.inf)
        to_slip = stick_viol > 0
        to_stick = slip_viol > 0
        if not (to_slip.any() or to_stick.any()):
            break

        new_stick, new_sign = stick.copy(), sign.copy()
        new_stick[to_slip] = False
        new_sign[to_slip] = -np.sign(s_tau[to_slip])
        new_stick[to_stick] = True
        if key(new_stick, new_sign) in visited:
            viol = np.maximum(stick_viol, slip_viol)
            j = int(np.argmax(viol))
            new_stick, new_sign = stick.copy(), sign.copy()
            if to_slip[j]:
                new_stick[j] = False
                new_sign[j] = -np.sign(s_tau[j])
            else:
                new_stick[j] = True
        stick, sign = new_stick, new_sign
        switches += 1
        visited.add(key(stick, sign))
        history.append((stick.copy(), sign.copy()))
        if switches > pd.max_switch:
            raise SwitchingError(
                f"switching did not converge in {pd.max_switch} iterations", history
            )

    mode = np.full(len(tn), int(Mode.SLIP))
    ratio = np.abs(s_tau) / g
    mode[stick & (ratio >= 1 - pd.eps_slip)] = Mode.STICK_BOUNDARY
    mode[stick & (ratio < 1 - pd.eps_slip)] = Mode.STICK_STRICT
    sign = np.where(stick, np.where(s_tau > 0, -1.0, 1.0), sign)
    # the rotated solve imposes u.tau = 0 up to round-off; record the imposed value
    u_tau = np.where(stick, 0.0, u_tau)
    state = ContactState(
        nodes=tn.copy(),
        mode=mode,
        sign=sign,
        sigma_n=sigma_n,
        s_tau=s_tau,
        g=g,
        u_tau=u_tau,
        switches=switches,
        history=tuple(history),
    )
    return u, state


def friction_term(mesh: Mesh, pd: ProblemData, u) -> float:
    _, tau, w, _ = tresca_frame(mesh)
    g = threshold_values(mesh, pd)
    u_tau = np.sum(np.asarray(u)[mesh.tresca_nodes] * tau, axis=1)
    return float(np.sum(g * w * np.abs(u_tau)))


def stiffness_form(mesh: Mesh, pd: ProblemData, u) -> float:
    """a(u, u), twice the elastic energy."""
    flat = np.asarray(u, dtype=float).ravel()
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    return float(flat @ (K @ flat))


def energy(mesh: Mesh, pd: ProblemData, u) -> float:
    """Tresca energy 1/2 a(u,u) + friction - F.u."""
    flat = np.asarray(u, dtype=float).ravel()
    load = problem_load(mesh, pd)
    return 0.5 * stiffness_form(mesh, pd, u) + friction_term(mesh, pd, u) - float(load @ flat)


def classify_boundary(state: ContactState, pd: ProblemData | None = None) -> Partition:
    """Split the Tresca nodes into slip (N), strict stick (D) and boundary stick (S).

    With ``pd`` given, sticking nodes are re-classified using its ``eps_slip``.
    """
    mode = np.asarray(state.mode)
    if pd is not None:
        ratio = np.abs(state.s_tau) / state.g
        stick = mode != Mode.SLIP
        mode = np.where(
            stick,
            np.where(ratio >= 1 - pd.eps_slip, Mode.STICK_BOUNDARY, Mode.STICK_STRICT),
            Mode.SLIP,
        )
    return Partition(
        N=np.flatnonzero(mode == Mode.SLIP),
        D=np.flatnonzero(mode == Mode.STICK_STRICT),
        S=np.flatnonzero(mode == Mode.STICK_BOUNDARY),
    )


def vi_slack(mesh: Mesh, pd: ProblemData, u, v) -> float:
    """a(u, v-u) + phi(v) - phi(u) - F.(v-u); non-negative for the solution."""
    K = assemble_elasticity(mesh, pd.mu, pd.lam)
    load = problem_load(mesh, pd)
    uf = np.asarray(u, dtype=float).ravel()
    d = np.asarray(v, dtype=float).ravel() - uf
    return float((K @ uf) @ d + friction_term(mesh, pd, v) - friction_term(mesh, pd, u) - load @ d)


def vi_residual(mesh: Mesh, pd: ProblemData, u, n_samples: int = 50, seed: int = 0) -> float:
    """Most negative VI slack over seeded random admissible test fields plus v = 0 and v = 2u."""
    u = np.asarray(u, dtype=float)
    rng = np.random.default_rng(seed)
    scale = max(np.max(np.abs(u)), 1.0)
    free = np.ones(mesh.nv, dtype=bool)
    free[mesh.dirichlet_nodes] = False
    tests = [np.zeros_like(u), 2 * u]
    for k in range(n_samples):
        delta = rng.standard_normal(u.shape) * scale * free[:, None]
        tests.append(u + delta if k % 2 == 0 else u + 1e-3 * delta)
    return min(vi_slack(mesh, pd, u, v) for v in tests)


def energy_scale(mesh: Mesh, pd: ProblemData, u) -> float:
    """Natural magnitude of VI slacks: the work of the load plus the elastic energy."""
    flat = np.asarray(u, dtype=float).ravel()
    load = problem_load(mesh, pd)
    return float(np.abs(load) @ np.abs(flat) + stiffness_form(mesh, pd, u)) or 1.0


@dataclass(frozen=True)
class OracleResult:
    u: np.ndarray
    iterations: int
    energies: np.ndarray


def oracle_projected_gradient(
    mesh: Mesh, pd: ProblemData, max_iter: int = 500_000, tol: float = 1e-15, seed: int = 0
) -> OracleResult:
    """Proximal-gradient minimization of the discrete Tresca energy with dense linear algebra.

    Step 1/L with L the largest eigenvalue of the free-dof stiffness (100
    power iterations, inflated by 1% for safety).  The friction prox
    soft-thresholds the tangential component at each Tresca node.  Stops when
    the energy decrease of one step falls below ``tol`` times the energy scale.
    """
    n_dof = 2 * mesh.nv
    if n_dof > 400:
        raise ValueError("oracle is meant for meshes with at most 400 dofs")
    K = assemble_elasticity(mesh, pd.mu, pd.lam).toarray()
    load = np.asarray(problem_load(mesh, pd))
    _, tau, w, _ = tresca_frame(mesh)
    g = threshold_values(mesh, pd)
    tn = mesh.tresca_nodes

    free = np.ones(mesh.nv, dtype=bool)
    free[mesh.dirichlet_nodes] = False
    fd = np.flatnonzero(np.repeat(free, 2))
    Kf = K[np.ix_(fd, fd)]
    Ff = load[fd]

    v = np.random.default_rng(seed).standard_normal(len(fd))
    for _ in range(100):
        v = Kf @ v
        v /= np.linalg.norm(v)
    L = 1.01 * float(v @ Kf @ v)
    step = 1.0 / L

    # positions of the Tresca tangential components inside the free vector
    index = -np.ones(n_dof, dtype=np.int64)
    index[fd] = np.arange(len(fd))
    ix, iy = index[2 * tn], index[2 * tn + 1]
    thresh = step * g * w

    def friction(x):
        return float(np.sum(g * w * np.abs(x[ix] * tau[:, 0] + x[iy] * tau[:, 1])))

    def total(x):
        return 0.5 * x @ (Kf @ x) - Ff @ x + friction(x)

    x = np.zeros(len(fd))
    energies = [0.0]
    it = 0
    for it in range(1, max_iter + 1):
        y = x - step * (Kf @ x - Ff)
        ut = y[ix] * tau[:, 0] + y[iy] * tau[:, 1]
        shrink = np.sign(ut) * np.maximum(np.abs(ut) - thresh, 0.0) - ut
        y[ix] += shrink * tau[:, 0]
        y[iy] += shrink * tau[:, 1]
        # energy decrease evaluated in difference form to avoid cancellation
        d = y - x
        decrease = -(d @ (Kf @ (0.5 * (x + y))) - Ff @ d + friction(y) - friction(x))
        x = y
        energies.append(total(x))
        scale = abs(Ff @ x) + 1e-300
        if decrease <= tol * scale:
            break
    u = np.zeros(n_dof)
    u[fd] = x
    return OracleResult(u.reshape(-1, 2), it, np.array(energies))
