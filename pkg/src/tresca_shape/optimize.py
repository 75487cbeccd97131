"""Volume-constrained descent on the Tresca energy with Uzawa multiplier updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calculus import boundary_operators, tresca_frame
from .mesh import DeformationError, Mesh, area, deform, mesh_quality
from .shape import GRADIENT_FORMS, GradientFunctional, descent_direction, dirichlet_taper
from .tresca import ProblemData, energy, solve_tresca


class StallError(RuntimeError):
    """No admissible step was found; ``history`` holds the iterations completed so far."""

    def __init__(self, message, history):
        self.history = history
        super().__init__(message)


@dataclass(frozen=True)
class OptimConfig:
    target_volume: float = math.pi
    rho: float = 1.0
    multiplier0: float = 0.0
    step0: float | None = None  # default 0.1 * mean edge length of the initial mesh
    shrink: float = 0.5
    max_iters: int = 400
    window: int = 20
    delta_j: float = 1e-3
    min_angle_deg: float = 5.0
    min_step: float = 1e-10
    gradient_form: str = "boundary"
    monotone: bool = False  # accept a step only if the Lagrangian does not increase
    normal_only: bool = True  # forbid tangential sliding of Tresca boundary nodes
    boundary_smoothing: float = 0.5  # weight of the boundary Laplace-Beltrami term in the metric
    taper: tuple | None = (0.045, 0.23)  # (inner, outer) cutoff radii near Dirichlet nodes, / diameter

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.step0 is not None and not self.step0 > 0:
            raise ValueError("step0 must be positive")
        if self.gradient_form not in GRADIENT_FORMS:
            raise ValueError(f"unknown gradient form {self.gradient_form!r}")


@dataclass
class OptimHistory:
    """One row per recorded shape; row 0 is the initial shape."""

    J: list = field(default_factory=list)
    volume: list = field(default_factory=list)
    multiplier: list = field(default_factory=list)
    step: list = field(default_factory=list)
    switch_iters: list = field(default_factory=list)
    min_angle: list = field(default_factory=list)  # radians
    stop_reason: str = ""

    def append(self, J, volume, multiplier, step, switch_iters, min_angle):
        self.J.append(float(J))
        self.volume.append(float(volume))
        self.multiplier.append(float(multiplier))
        self.step.append(float(step))
        self.switch_iters.append(int(switch_iters))
        self.min_angle.append(float(min_angle))

    def __len__(self):
        return len(self.J)

    @property
    def iterations(self) -> int:
        return max(len(self.J) - 1, 0)

    def rows(self):
        for k in range(len(self.J)):
            yield (k, self.J[k], self.volume[k], self.multiplier[k], self.step[k], self.switch_iters[k], self.min_angle[k])


def stopping_check(history: OptimHistory, cfg: OptimConfig) -> bool:
    """True at iteration k = W*j (j >= 1) when |J_k - J_{k-W}| < delta_J."""
    k = history.iterations
    W = cfg.window
    if k < W or k % W:
        return False
    return abs(history.J[k] - history.J[k - W]) < cfg.delta_j


def volume_constraint_gradient(mesh: Mesh) -> GradientFunctional:
    """``theta -> sum over Tresca nodes of (theta . n) w``; Dirichlet nodes contribute nothing."""
    ops = boundary_operators(mesh)
    _, _, w, _ = tresca_frame(mesh)
    return GradientFunctional({"volume": ops.theta_n.T @ w})


def run_optimization(mesh0: Mesh, pd: ProblemData, cfg: OptimConfig, callback=None):
    """Descent loop; returns ``(final mesh, OptimHistory)``.

    ``callback(k, mesh, u, state)`` is invoked for every recorded shape.
    """
    form = GRADIENT_FORMS[cfg.gradient_form]
    floor = math.radians(cfg.min_angle_deg)
    step0 = cfg.step0 if cfg.step0 is not None else 0.1 * mesh0.h

    mesh = mesh0
    u, state = solve_tresca(mesh, pd)
    J = energy(mesh, pd, u)
    vol = area(mesh)
    ell = cfg.multiplier0
    history = OptimHistory()
    history.append(J, vol, ell, 0.0, state.switches, mesh_quality(mesh)[0])
    if callback:
        callback(0, mesh, u, state)

    reference_peak = None
    for k in range(1, cfg.max_iters + 1):
        functional = form(mesh, pd, u, state) + volume_constraint_gradient(mesh).scaled(ell)
        chi = dirichlet_taper(mesh, *cfg.taper) if cfg.taper else None
        theta = descent_direction(
            mesh, functional, normal_only=cfg.normal_only, boundary_smoothing=cfg.boundary_smoothing, taper=chi
        )
        peak = float(np.max(np.linalg.norm(theta, axis=1)))
        if peak <= 1e-14 * max(mesh.diameter, 1.0):
            history.stop_reason = "stationary"
            return mesh, history
        # Steps are measured against the first direction's peak and capped at
        # step0 of nodal motion, so they shrink as the Lagrangian settles.
        if reference_peak is None:
            reference_peak = peak
        theta = theta / max(peak, reference_peak)
        lagrangian = J + ell * (vol - cfg.target_volume)

        t = step0
        while True:
            if t < cfg.min_step:
                history.stop_reason = "stall"
                raise StallError(f"no admissible step at iteration {k}", history)
            try:
                trial = deform(mesh, theta, t)
            except DeformationError as exc:
                t = min(t * cfg.shrink, exc.t_max * cfg.shrink) if exc.t_max > 0 else t * cfg.shrink
                continue
            angle = mesh_quality(trial)[0]
            if angle < floor:
                t *= cfg.shrink
                continue
            ut, st_t = solve_tresca(trial, pd, warm_start=state)
            Jt = energy(trial, pd, ut)
            vt = area(trial)
            if cfg.monotone and Jt + ell * (vt - cfg.target_volume) > lagrangian:
                t *= cfg.shrink
                continue
            break

        mesh, u, state, J, vol = trial, ut, st_t, Jt, vt
        ell = ell + cfg.rho * (vol - cfg.target_volume)
        history.append(J, vol, ell, t, state.switches, angle)
        if callback:
            callback(k, mesh, u, state)
        if stopping_check(history, cfg):
            history.stop_reason = "converged"
            return mesh, history
    history.stop_reason = "max_iters"
    return mesh, history
