"""Command-line entry point: ``tresca-shape <command> [options]``."""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config, validate_config
from .expression import EvaluationError, ExpressionSyntaxError, ScalarField, VectorField2
from .fem import DataError, SolverError, evaluate_field
from .mesh import ConfigurationError, DeformationError, left_edge_dirichlet, rectangle_mesh
from .optimize import StallError, run_optimization
from .shape import ActiveSetError, fd_gradient_check, shape_gradient_report, smooth_direction
from .tresca import (
    ProblemData,
    SwitchingError,
    classify_boundary,
    energy,
    oracle_projected_gradient,
    solve_tresca,
    stiffness_form,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_STALL = 0, 2, 3, 4
GRADCHECK_STEPS = (1e-2, 1e-3, 1e-4)


def _provenance(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "a": repr(cfg.a), "b": repr(cfg.b), "h": repr(cfg.h), "seed": cfg.seed}


def _title(cfg: RunConfig, command: str) -> str:
    return "tresca_shape " + " ".join(f"{k}={v}" for k, v in _provenance(cfg, command).items())


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def cmd_solve(cfg: RunConfig) -> int:
    mesh = cfg.mesh()
    pd = cfg.problem_data()
    u, state = solve_tresca(mesh, pd)
    g_nodes = evaluate_field(pd.g, mesh.vertices)
    io.write_vtk(mesh, io.solution_fields(mesh, u, state, g_nodes), _out(cfg, "solution.vtk"), _title(cfg, "solve"))
    io.write_boundary_vtk(mesh, _out(cfg, "boundary.vtk"), _title(cfg, "solve"))
    io.write_contact_csv(mesh, state, _out(cfg, "contact.csv"), _provenance(cfg, "solve"))
    part = classify_boundary(state, pd)
    print(
        f"nodes={mesh.nv} J={energy(mesh, pd, u):.12g} switches={state.switches} "
        f"slip={len(part.N)} stick={len(part.D)} boundary_stick={len(part.S)}"
    )
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    mesh0 = cfg.mesh()
    pd = cfg.problem_data()
    title = _title(cfg, "optimize")
    period = cfg.snapshot_every
    last = {}

    def snapshot(k, mesh, u, state):
        last.update(k=k, mesh=mesh, u=u, state=state)
        if k == 0 or (period and k % period == 0):
            io.write_vtk(mesh, {"displacement": u}, _out(cfg, f"shape_{k:05d}.vtk"), title)

    try:
        _, history = run_optimization(mesh0, pd, cfg.optim, callback=snapshot)
    except StallError as exc:
        io.write_history_csv(exc.history, _out(cfg, "history.csv"), _provenance(cfg, "optimize"))
        raise
    io.write_history_csv(history, _out(cfg, "history.csv"), _provenance(cfg, "optimize"))
    if last:
        io.write_vtk(last["mesh"], {"displacement": last["u"]}, _out(cfg, "shape_final.vtk"), title)
    print(
        f"stop={history.stop_reason} iterations={history.iterations} "
        f"J0={history.J[0]:.12g} J={history.J[-1]:.12g} volume={history.volume[-1]:.12g} "
        f"min_angle_deg={math.degrees(min(history.min_angle)):.4g}"
    )
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig) -> int:
    mesh = cfg.mesh()
    pd = cfg.problem_data()
    u, state = solve_tresca(mesh, pd)
    theta = smooth_direction(mesh, cfg.seed)
    rows = fd_gradient_check(mesh, pd, theta, GRADCHECK_STEPS, u0=u, state=state)
    io.write_gradcheck_csv(rows, _out(cfg, "gradcheck.csv"), _provenance(cfg, "grad-check"))
    report = shape_gradient_report(mesh, pd, u, state, theta)
    io.write_json(report.to_json(), _out(cfg, "report.json"))
    print(f"boundary form {rows[0].boundary:.10g}  volume form {rows[0].volume:.10g}")
    for flag in report.flags:
        print(f"note: {flag}")
    for r in rows:
        print(
            f"t={r.t:.0e} quotient={r.quotient:.10g} "
            f"rel_err_boundary={r.rel_error_boundary:.3e} rel_err_volume={r.rel_error_volume:.3e}"
        )
    return EXIT_OK


def ellipse_curvature(a: float, b: float, points) -> np.ndarray:
    """Exact curvature of the ellipse at points on it, via the parameter angle."""
    pts = np.asarray(points, dtype=float)
    gamma = np.arctan2(pts[:, 1] / b, pts[:, 0] / a)
    return a * b / (a * a * np.sin(gamma) ** 2 + b * b * np.cos(gamma) ** 2) ** 1.5


def cmd_curvature_check(cfg: RunConfig) -> int:
    mesh = cfg.mesh()
    bn = mesh.boundary_nodes
    pts = mesh.vertices[bn]
    discrete = mesh.frame.curvature
    exact = ellipse_curvature(cfg.a, cfg.b, pts)
    rel = np.abs(discrete - exact) / exact
    lines = [f"# command=curvature-check a={cfg.a!r} b={cfg.b!r} h={cfg.h!r}", "node,x,y,H_discrete,H_exact,rel_error"]
    lines.extend(
        ",".join([str(int(n)), io.fmt(x), io.fmt(y), io.fmt(d), io.fmt(e), io.fmt(r)])
        for n, (x, y), d, e, r in zip(bn, pts, discrete, exact, rel)
    )
    io.atomic_write_text(_out(cfg, "curvature.csv"), "\n".join(lines) + "\n")
    vertex = int(np.argmax(pts[:, 0]))
    print(
        f"boundary nodes={len(bn)} max_rel_error={rel.max():.3e} mean_rel_error={rel.mean():.3e} "
        f"H(a,0)={discrete[vertex]:.6g} exact={exact[vertex]:.6g}"
    )
    return EXIT_OK


def oracle_setup():
    """Built-in coarse problem: 6x6 unit square, clamped left edge, f = (0,-1), g = 0.3."""
    mesh = rectangle_mesh(6, 6, edge_tagger=left_edge_dirichlet)
    pd = ProblemData(f=VectorField2("0", "-1"), g=ScalarField("0.3"))
    return mesh, pd


def cmd_oracle_check(cfg: RunConfig) -> int:
    mesh, pd = oracle_setup()
    pd = replace(pd, mu=cfg.mu, lam=cfg.lam)
    start = time.perf_counter()
    u, state = solve_tresca(mesh, pd)
    oracle = oracle_projected_gradient(mesh, pd, seed=cfg.seed)
    elapsed = time.perf_counter() - start
    diff = math.sqrt(max(stiffness_form(mesh, pd, u - oracle.u), 0.0))
    scale = math.sqrt(max(stiffness_form(mesh, pd, oracle.u), 1e-300))
    lines = [
        "{",
        f'  "nodes": {mesh.nv},',
        f'  "energy_norm_difference": {io.fmt(diff)},',
        f'  "relative_difference": {io.fmt(diff / scale)},',
        f'  "J_switching": {io.fmt(energy(mesh, pd, u))},',
        f'  "J_oracle": {io.fmt(energy(mesh, pd, oracle.u))},',
        f'  "oracle_iterations": {oracle.iterations},',
        f'  "seconds": {io.fmt(elapsed)}',
        "}",
    ]
    io.atomic_write_text(_out(cfg, "oracle.json"), "\n".join(lines) + "\n")
    print(f"nodes={mesh.nv} energy_norm_difference={diff:.3e} relative={diff / scale:.3e} seconds={elapsed:.2f}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "optimize": cmd_optimize,
    "grad-check": cmd_grad_check,
    "curvature-check": cmd_curvature_check,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tresca-shape", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for random directions and sampling")
    parser.add_argument("--h", type=float, help="target mesh edge length")
    parser.add_argument("--max-iters", type=int, help="optimizer iteration limit")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.out is not None:
        changes["out"] = args.out
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        changes["seed"] = args.seed
    if args.h is not None:
        changes["h"] = args.h
    if args.max_iters is not None:
        if args.max_iters < 1:
            raise ConfigError("max-iters must be at least 1")
        changes["optim"] = replace(cfg.optim, max_iters=args.max_iters)
    if changes:
        cfg = replace(cfg, **changes)
        validate_config(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ConfigurationError, ExpressionSyntaxError, EvaluationError, DataError) as exc:
        code, kind, error = EXIT_CONFIG, "configuration error", exc
    except (SwitchingError, SolverError, ActiveSetError) as exc:
        code, kind, error = EXIT_SOLVER, "solver did not converge", exc
    except (StallError, DeformationError) as exc:
        code, kind, error = EXIT_STALL, "deformation stall", exc
    except OSError as exc:
        reading_config = args.config and getattr(exc, "filename", None) == args.config
        code, kind, error = (EXIT_CONFIG, "configuration error", exc) if reading_config else (1, "i/o error", exc)
    message = " ".join(str(error).split())
    print(f"tresca-shape: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
