import json
import math

import numpy as np
import pytest

from tresca_shape import io
from tresca_shape.cli import build_parser, main


def run(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_config(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_solve_writes_all_outputs(tmp_path, capsys):
    code, out, _ = run(["solve", "--h", "0.15", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["boundary.vtk", "contact.csv", "solution.vtk"]
    assert out.startswith("nodes=") and "switches=" in out
    text = (tmp_path / "solution.vtk").read_text()
    assert "SCALARS mode double 1" in text and "VECTORS displacement double" in text
    header = (tmp_path / "contact.csv").read_text().splitlines()[1]
    assert header == "node,x,y,mode,sigma_n,s_tau,g,u_tau"


def test_solve_with_zero_load(tmp_path, capsys):
    cfg = write_config(tmp_path, "f_x = 0\nf_y = 0\nh = 0.15\n")
    code, out, _ = run(["solve", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 0 and "J=0 " in out
    lines = (tmp_path / "o" / "solution.vtk").read_text().splitlines()
    start = lines.index("VECTORS displacement double") + 1
    nv = int(next(line for line in lines if line.startswith("POINTS")).split()[1])
    assert all(line == "0 0 0" for line in lines[start : start + nv])


def test_solve_is_byte_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["solve", "--h", "0.15", "--out", str(tmp_path / name)], capsys)[0] == 0
    for f in ("solution.vtk", "boundary.vtk", "contact.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_optimize_writes_history_and_snapshots(tmp_path, capsys):
    cfg = write_config(tmp_path, "h = 0.15\nsnapshot_every = 10\n")
    code, out, _ = run(["optimize", "--config", cfg, "--max-iters", "20", "--out", str(tmp_path / "o")], capsys)
    assert code == 0 and "stop=max_iters" in out
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == ["history.csv", "shape_00000.vtk", "shape_00010.vtk", "shape_00020.vtk", "shape_final.vtk"]
    history = io.read_history_csv(tmp_path / "o" / "history.csv")
    assert list(history["iter"]) == list(range(21))
    assert history["J"][-1] < history["J"][0]
    assert np.all(np.abs(history["volume"] - math.pi) < 0.05 * math.pi)


def test_grad_check_outputs(tmp_path, capsys):
    code, out, _ = run(["grad-check", "--h", "0.1", "--seed", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[1] == "t,quotient,boundary,volume,rel_error_boundary,rel_error_volume"
    t = [float(line.split(",")[0]) for line in lines[2:]]
    assert t == [1e-2, 1e-3, 1e-4]
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {"value_boundary", "value_volume", "terms", "theta_norm_h1"}
    assert "rel_err_boundary=" in out


def test_curvature_check(tmp_path, capsys):
    code, out, _ = run(["curvature-check", "--h", "0.05", "--out", str(tmp_path)], capsys)
    assert code == 0
    lines = (tmp_path / "curvature.csv").read_text().splitlines()
    assert lines[1] == "node,x,y,H_discrete,H_exact,rel_error"
    rel = np.array([float(line.split(",")[-1]) for line in lines[2:]])
    assert rel.max() < 0.03
    assert "H(a,0)=" in out


def test_oracle_check(tmp_path, capsys):
    code, out, _ = run(["oracle-check", "--out", str(tmp_path)], capsys)
    assert code == 0
    report = json.loads((tmp_path / "oracle.json").read_text())
    assert report["nodes"] <= 60
    assert report["energy_norm_difference"] <= 1e-6
    assert "energy_norm_difference=" in out


# ---------------------------------------------------------------------------
# failures and exit codes


def assert_one_line_error(err, kind):
    lines = err.splitlines()
    assert len(lines) == 1
    assert lines[0].startswith(f"tresca-shape: {kind}: ")


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(["solve", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)], capsys)
    assert code == 2
    assert_one_line_error(err, "configuration error")


@pytest.mark.parametrize("text", ["g = -1\n", "bogus = 3\n", "f_x = 1/(x-x)\n", "h = 0\n"])
def test_bad_config_exit_code(tmp_path, capsys, text):
    cfg = write_config(tmp_path, text)
    code, _, err = run(["solve", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == 2
    assert_one_line_error(err, "configuration error")
    assert not (tmp_path / "solution.vtk").exists()


def test_negative_seed_is_a_config_error(tmp_path, capsys):
    code, _, err = run(["grad-check", "--seed", "-1", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert_one_line_error(err, "configuration error")


def test_switching_cap_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, "max_switch = 1\n")
    code, _, err = run(["solve", "--config", cfg, "--out", str(tmp_path)], capsys)
    assert code == 3
    assert_one_line_error(err, "solver did not converge")


def test_stall_exit_code_keeps_history(tmp_path, capsys):
    cfg = write_config(tmp_path, "min_angle_deg = 89\nh = 0.15\n")
    code, _, err = run(["optimize", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
    assert code == 4
    assert_one_line_error(err, "deformation stall")
    assert len(io.read_history_csv(tmp_path / "o" / "history.csv")["J"]) == 1


def test_unknown_command_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["flatten"])
    assert info.value.code == 2


def test_parser_lists_every_command():
    choices = build_parser()._actions[1].choices
    assert sorted(choices) == ["curvature-check", "grad-check", "optimize", "oracle-check", "solve"]
