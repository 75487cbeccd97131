import math
import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tresca_shape import io
from tresca_shape.config import (
    DEFAULT_ARCS,
    ConfigError,
    RunConfig,
    load_config,
    parse_config,
    positivity_samples,
    serialize_config,
)
from tresca_shape.fem import assemble_h1_metric
from tresca_shape.mesh import rectangle_mesh
from tresca_shape.optimize import OptimConfig, OptimHistory
from tresca_shape.shape import FDRow
from tresca_shape.tresca import solve_tresca

# ---------------------------------------------------------------------------
# configuration


def test_default_round_trip():
    cfg = RunConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_round_trip_of_every_field_changed():
    cfg = RunConfig(
        a=1.3,
        b=0.7,
        h=0.0625,
        gammaD=((0.1, 1.0), (2.0, 2.5)),
        mu=0.75,
        lam=0.1,
        f_x="x*y",
        f_y="-1",
        g="2+cos(x)",
        window_radius=3.0,
        linear_tol=1e-11,
        switch_tol=1e-9,
        eps_slip=1e-5,
        max_switch=77,
        optim=OptimConfig(
            target_volume=2.5,
            rho=0.3,
            multiplier0=-0.2,
            step0=0.004,
            shrink=0.25,
            max_iters=11,
            window=7,
            delta_j=1e-4,
            min_angle_deg=7.5,
            min_step=1e-9,
            gradient_form="volume",
            monotone=True,
            normal_only=False,
            boundary_smoothing=0.0,
            taper=None,
        ),
        out="elsewhere",
        seed=9,
        snapshot_every=3,
    )
    assert parse_config(serialize_config(cfg)) == cfg


def test_default_arcs_in_expression_syntax():
    cfg = parse_config("gammaD = [2pi/3,4pi/3];[5pi/3,7pi/3]\n")
    assert cfg.gammaD == DEFAULT_ARCS
    assert parse_config("b = 1/1.1").b == 1 / 1.1


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config("# heading\n\n  h = 0.1   # coarser\nmax_iters = 3\n")
    assert cfg.h == 0.1 and cfg.optim.max_iters == 3


@pytest.mark.parametrize(
    "text",
    [
        "nonsense = 1",
        "h 0.1",
        "h = x",
        "h = 1+",
        "gammaD = 1,2",
        "gammaD = [1,2,3]",
        "max_iters = many",
        "monotone = perhaps",
        "g = -1",
        "g = 1/x",
        "f_x = sqrt(x)",
        "mu = 0",
        "h = -0.1",
        "window = 0",
        "gradient_form = magic",
        "taper = 0.1",
    ],
)
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_positivity_sampling_uses_ten_thousand_points():
    pts = positivity_samples(1.1, 1 / 1.1, 10_000, seed=0)
    assert pts.shape == (10_000, 2)
    assert np.all((pts[:, 0] / 1.1) ** 2 + (pts[:, 1] * 1.1) ** 2 <= 1 + 1e-12)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("a = 1.2\nseed = 4\n")
    cfg = load_config(path)
    assert cfg.a == 1.2 and cfg.seed == 4


def test_problem_data_and_mesh_from_config():
    cfg = RunConfig(h=0.2)
    pd = cfg.problem_data()
    assert pd.g(np.array([[0.0, -1.0]]))[0] == pytest.approx(2.001)
    assert cfg.mesh().nv > 50
    windowed = replace(cfg, window_radius=5.0).problem_data()
    pts = np.array([[0.1, 0.2]])
    assert windowed.g(pts) == pytest.approx(pd.g(pts))


# ---------------------------------------------------------------------------
# writers


@pytest.fixture(scope="module")
def small_solution(pd):
    mesh = RunConfig(h=0.2).mesh()
    u, state = solve_tresca(mesh, pd)
    return mesh, u, state


def test_mesh_only_vtk(tmp_path):
    mesh = rectangle_mesh(2, 1)
    io.write_vtk(mesh, {}, tmp_path / "m.vtk")
    text = (tmp_path / "m.vtk").read_text()
    lines = text.splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
    assert "POINTS 6 double" in lines
    assert "CELLS 4 16" in lines and "CELL_TYPES 4" in lines
    assert "POINT_DATA" not in text
    assert text.endswith("\n") and "\r" not in text


def test_vtk_fields_and_precision(small_solution, pd):
    mesh, u, state = small_solution
    g = pd.g(mesh.vertices)
    text = io.vtk_text(mesh, io.solution_fields(mesh, u, state, g))
    assert "VECTORS displacement double" in text
    for name in ("g", "sigma_n", "s_tau", "mode"):
        assert f"SCALARS {name} double 1" in text
    lines = text.splitlines()
    first = lines[lines.index("VECTORS displacement double") + 1].split()
    assert first[2] == "0"
    k = lines.index("POINTS %d double" % mesh.nv) + 1
    x = float(lines[k].split()[0])
    assert x == mesh.vertices[0, 0]
    start = lines.index("SCALARS mode double 1") + 2
    modes = np.array([float(v) for v in lines[start : start + mesh.nv]])
    assert set(np.unique(modes)) <= {-1.0, 0.0, 1.0, 2.0}
    np.testing.assert_array_equal(modes[state.nodes], state.mode)


def test_vtk_is_byte_reproducible(tmp_path, small_solution):
    mesh, u, _ = small_solution
    io.write_vtk(mesh, {"displacement": u}, tmp_path / "a.vtk")
    io.write_vtk(mesh, {"displacement": u}, tmp_path / "b.vtk")
    assert (tmp_path / "a.vtk").read_bytes() == (tmp_path / "b.vtk").read_bytes()


def test_vtk_rejects_misshaped_fields():
    mesh = rectangle_mesh(1, 1)
    with pytest.raises(ValueError):
        io.vtk_text(mesh, {"bad": np.zeros(3)})


def test_zero_displacement_block(zero_force_pd):
    mesh = RunConfig(h=0.2).mesh()
    u, state = solve_tresca(mesh, zero_force_pd)
    lines = io.vtk_text(mesh, {"displacement": u}).splitlines()
    start = lines.index("VECTORS displacement double") + 1
    assert all(line == "0 0 0" for line in lines[start : start + mesh.nv])


def test_boundary_vtk(small_solution):
    mesh, _, _ = small_solution
    lines = io.boundary_vtk_text(mesh).splitlines()
    nb = len(mesh.boundary_nodes)
    assert "DATASET POLYDATA" in lines and f"LINES {nb} {3 * nb}" in lines
    tags = lines[-nb:]
    assert set(tags) == {"0", "1"}


def test_contact_csv(tmp_path, small_solution):
    mesh, _, state = small_solution
    path = tmp_path / "contact.csv"
    io.write_contact_csv(mesh, state, path, {"h": 0.2})
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    assert lines[1] == "node,x,y,mode,sigma_n,s_tau,g,u_tau"
    assert len(lines) == 2 + len(state.nodes)
    row = lines[2].split(",")
    assert len(row) == 8 and int(row[0]) == state.nodes[0]
    assert float(row[5]) == state.s_tau[0]


def test_history_csv_round_trip(tmp_path):
    history = OptimHistory()
    history.append(-1.5, math.pi, 0.0, 0.0, 3, 0.5)
    history.append(-1.6, 3.1, -0.04, 0.005, 1, 0.45)
    path = tmp_path / "history.csv"
    io.write_history_csv(history, path, {"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[1] == "iter,J,volume,multiplier,step,switch_iters,min_angle"
    assert lines[2].split(",")[2] == "3.1415926535897931"
    back = io.read_history_csv(path)
    assert list(back["iter"]) == [0, 1]
    assert list(back["J"]) == history.J
    assert list(back["volume"]) == history.volume


def test_gradcheck_csv():
    rows = [FDRow(1e-2, 0.5, 0.49, 0.495), FDRow(1e-3, 0.491, 0.49, 0.495)]
    lines = io.gradcheck_csv_text(rows).splitlines()
    assert lines[0] == "t,quotient,boundary,volume,rel_error_boundary,rel_error_volume"
    assert len(lines) == 3 and lines[1].startswith("0.01,0.5,0.48999999999999999,")


def test_matrix_market(tmp_path):
    mesh = rectangle_mesh(1, 1)
    M = assemble_h1_metric(mesh)
    path = tmp_path / "m.mtx"
    io.write_matrix_market(path, M)
    lines = path.read_text().splitlines()
    assert lines[0] == "%%MatrixMarket matrix coordinate real symmetric"
    n, m, nnz = map(int, lines[1].split())
    assert n == m == 8 and nnz == len(lines) - 2
    entries = [tuple(map(float, line.split())) for line in lines[2:]]
    assert all(i >= j for i, j, _ in entries)
    dense = np.zeros((8, 8))
    for i, j, v in entries:
        dense[int(i) - 1, int(j) - 1] = dense[int(j) - 1, int(i) - 1] = v
    np.testing.assert_array_equal(dense, M.toarray())


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "sub" / "out.txt"
    io.atomic_write_text(target, "one\n")
    io.atomic_write_text(target, "two\n")
    assert target.read_bytes() == b"two\n"
    assert os.listdir(target.parent) == ["out.txt"]


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    io.atomic_write_text(target, "old\n")
    with pytest.raises(UnicodeEncodeError):
        io.atomic_write_text(target, "néw\n")
    assert target.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.txt"]


semi_axis = st.floats(min_value=0.2, max_value=3.0)


@settings(max_examples=60, deadline=None)
@given(a=semi_axis, b=semi_axis, mu=st.floats(min_value=1e-3, max_value=1e3), rho=st.floats(0.0, 10.0), seed=st.integers(0, 2**31), window=st.integers(1, 100))
def test_round_trip_is_exact_for_arbitrary_floats(a, b, mu, rho, seed, window):
    cfg = RunConfig(a=a, b=b, mu=mu, seed=seed, optim=OptimConfig(rho=rho, window=window), g="1")
    assert parse_config(serialize_config(cfg)) == cfg
