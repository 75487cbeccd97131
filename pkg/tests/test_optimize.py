import math

import numpy as np
import pytest

from conftest import ellipse_mesh
from tresca_shape.mesh import Mesh, area, deform, generate_ellipse_mesh
from tresca_shape.optimize import (
    OptimConfig,
    OptimHistory,
    StallError,
    run_optimization,
    stopping_check,
    volume_constraint_gradient,
)


def trace(values):
    history = OptimHistory()
    for J in values:
        history.append(J, 1.0, 0.0, 0.0, 0, 0.5)
    return history


def checks_along(values, cfg):
    """stopping_check evaluated after each recorded iteration."""
    return [stopping_check(trace(values[: k + 1]), cfg) for k in range(len(values))]


@pytest.fixture(scope="module")
def coarse(pd):
    return ellipse_mesh(0.15)


@pytest.fixture(scope="module")
def short_run(coarse, pd):
    return run_optimization(coarse, pd, OptimConfig(max_iters=25))


# ---------------------------------------------------------------------------
# stopping rule


def test_constant_trace_stops_at_first_full_window():
    cfg = OptimConfig(window=20, delta_j=1e-3)
    flags = checks_along([-1.0] * 41, cfg)
    assert flags[40]
    assert flags.index(True) == 20


def test_steadily_decreasing_trace_never_stops():
    cfg = OptimConfig(window=5, delta_j=1e-3)
    flags = checks_along([-0.01 * k for k in range(60)], cfg)
    assert not any(flags)


def test_oscillating_trace_stops_at_first_settled_window():
    cfg = OptimConfig(window=20, delta_j=1e-3)
    k = np.arange(400)
    values = list(-2.0 + 0.5 * np.exp(-k / 60.0) * (1 + 0.3 * np.cos(0.7 * k)))
    expected = next(
        20 * j for j in range(1, 20) if abs(values[20 * j] - values[20 * (j - 1)]) < cfg.delta_j
    )
    flags = checks_along(values, cfg)
    assert flags.index(True) == expected
    assert sum(flags[: expected + 1]) == 1


def test_checks_only_on_window_multiples():
    cfg = OptimConfig(window=4, delta_j=1.0)
    flags = checks_along([0.0] * 13, cfg)
    assert [i for i, f in enumerate(flags) if f] == [4, 8, 12]


# ---------------------------------------------------------------------------
# volume constraint gradient


def free_disk(h):
    disk = generate_ellipse_mesh(1.0, 1.0, h, [(0.0, 0.5)])
    return Mesh.from_triangles(disk.vertices, disk.triangles)


def test_volume_gradient_of_normal_field_is_perimeter():
    errors = []
    for h in (0.1, 0.05):
        mesh = free_disk(h)
        theta = np.zeros((mesh.nv, 2))
        theta[mesh.boundary_nodes] = mesh.frame.normal
        errors.append(abs(volume_constraint_gradient(mesh)(theta) - 2 * math.pi))
    assert errors[1] < 2 * 0.05**2
    assert errors[1] < errors[0]


def test_volume_gradient_of_tangential_field_vanishes(mesh05):
    theta = np.zeros((mesh05.nv, 2))
    theta[mesh05.boundary_nodes] = mesh05.frame.tangent
    assert abs(volume_constraint_gradient(mesh05)(theta)) < 1e-13


def test_volume_gradient_ignores_dirichlet_nodes(mesh05):
    theta = np.zeros((mesh05.nv, 2))
    theta[mesh05.dirichlet_nodes] = 1.0
    assert volume_constraint_gradient(mesh05)(theta) == 0.0


def test_volume_gradient_matches_area_difference(mesh05):
    x, y = mesh05.vertices.T
    theta = np.stack([np.cos(2 * y) * x, 0.5 + np.sin(x)], axis=1)
    theta[mesh05.dirichlet_nodes] = 0.0
    t = 1e-3
    quotient = (area(deform(mesh05, theta, t)) - area(mesh05)) / t
    assert volume_constraint_gradient(mesh05)(theta) == pytest.approx(quotient, rel=0.01)


# ---------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize(
    "changes",
    [{"window": 0}, {"shrink": 1.0}, {"shrink": 0.0}, {"rho": -1.0}, {"step0": 0.0}, {"gradient_form": "magic"}],
)
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ValueError):
        OptimConfig(**changes)


def test_defaults():
    cfg = OptimConfig()
    assert cfg.target_volume == math.pi
    assert (cfg.rho, cfg.multiplier0, cfg.shrink, cfg.window, cfg.min_angle_deg) == (1.0, 0.0, 0.5, 20, 5.0)


# ---------------------------------------------------------------------------
# descent loop


def test_zero_load_terminates_immediately(coarse, zero_force_pd):
    cfg = OptimConfig(target_volume=area(coarse), multiplier0=0.0)
    mesh, history = run_optimization(coarse, zero_force_pd, cfg)
    assert mesh is coarse
    assert history.iterations == 0 and len(history) == 1
    assert history.stop_reason == "stationary"
    assert history.J == [0.0]


def test_history_shape_and_mesh_validity(short_run):
    mesh, history = short_run
    assert history.iterations == 25 and len(history) == 26
    assert history.stop_reason == "max_iters"
    assert all(v > 0 for v in history.volume)
    assert min(history.min_angle) >= math.radians(5.0)
    assert history.step[0] == 0.0 and all(s > 0 for s in history.step[1:])
    assert history.switch_iters[0] >= history.switch_iters[-1]
    rows = list(history.rows())
    assert rows[0][0] == 0 and rows[-1][0] == 25


def test_multiplier_recursion_is_exact(short_run):
    _, history = short_run
    cfg = OptimConfig()
    for k in range(1, len(history)):
        assert history.multiplier[k] == history.multiplier[k - 1] + cfg.rho * (history.volume[k] - cfg.target_volume)


def test_runs_are_deterministic(coarse, pd, short_run):
    mesh, history = run_optimization(coarse, pd, OptimConfig(max_iters=25))
    assert history == short_run[1]
    assert np.array_equal(mesh.vertices, short_run[0].vertices)


def test_unconstrained_descent_is_monotone(coarse, pd):
    cfg = OptimConfig(target_volume=area(coarse), rho=0.0, max_iters=30)
    _, history = run_optimization(coarse, pd, cfg)
    assert all(b <= a for a, b in zip(history.J, history.J[1:]))
    assert history.J[-1] < history.J[0]
    assert set(history.multiplier) == {0.0}


def test_monotone_line_search_never_increases_the_lagrangian(coarse, pd):
    cfg = OptimConfig(max_iters=15, monotone=True, rho=0.5)
    _, history = run_optimization(coarse, pd, cfg)
    for k in range(1, len(history)):
        ell = history.multiplier[k - 1]
        before = history.J[k - 1] + ell * (history.volume[k - 1] - cfg.target_volume)
        after = history.J[k] + ell * (history.volume[k] - cfg.target_volume)
        assert after <= before


@pytest.mark.parametrize("form", ["volume", "discrete"])
def test_other_gradient_forms_run(coarse, pd, form):
    _, history = run_optimization(coarse, pd, OptimConfig(max_iters=5, gradient_form=form))
    assert history.iterations == 5


def test_callback_sees_every_recorded_shape(coarse, pd):
    seen = []
    run_optimization(coarse, pd, OptimConfig(max_iters=3), callback=lambda k, mesh, u, state: seen.append((k, mesh.nv)))
    assert [k for k, _ in seen] == [0, 1, 2, 3]


def test_impossible_quality_floor_stalls_with_history(coarse, pd):
    cfg = OptimConfig(max_iters=5, min_angle_deg=89.0)
    with pytest.raises(StallError) as info:
        run_optimization(coarse, pd, cfg)
    history = info.value.history
    assert len(history) == 1 and history.stop_reason == "stall"
