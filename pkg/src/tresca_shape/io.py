"""File outputs: legacy ASCII VTK, CSV tables, JSON reports and MatrixMarket.

Every writer builds the full text first and then replaces the target
atomically (temporary file in the same directory, then rename).  Floats use
17 significant digits and lines end in LF, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

import csv
import os
import tempfile

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .optimize import OptimHistory
from .shape import FDRow
from .tresca import ContactState

HISTORY_HEADER = "iter,J,volume,multiplier,step,switch_iters,min_angle"
CONTACT_HEADER = "node,x,y,mode,sigma_n,s_tau,g,u_tau"
GRADCHECK_HEADER = "t,quotient,boundary,volume,rel_error_boundary,rel_error_volume"


def fmt(value) -> str:
    return "%.17g" % value


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _comment(provenance) -> list[str]:
    if not provenance:
        return []
    return ["# " + " ".join(f"{k}={v}" for k, v in provenance.items())]


# ---------------------------------------------------------------------------
# VTK


def vtk_text(mesh: Mesh, fields=None, title: str = "tresca_shape mesh") -> str:
    """Legacy ASCII UNSTRUCTURED_GRID of triangles with optional point data.

    ``fields`` maps names to nodal arrays: shape (nv, 2) becomes ``VECTORS``
    (z padded with 0), shape (nv,) becomes ``SCALARS``.
    """
    fields = fields or {}
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.nv} double")
    lines.extend(f"{fmt(x)} {fmt(y)} 0" for x, y in mesh.vertices)
    lines.append(f"CELLS {mesh.nt} {4 * mesh.nt}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    lines.append(f"CELL_TYPES {mesh.nt}")
    lines.extend("5" for _ in range(mesh.nt))
    if fields:
        lines.append(f"POINT_DATA {mesh.nv}")
        for name, values in fields.items():
            arr = np.asarray(values, dtype=float)
            if arr.shape == (mesh.nv, 2):
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{fmt(x)} {fmt(y)} 0" for x, y in arr)
            elif arr.shape == (mesh.nv,):
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(fmt(v) for v in arr)
            else:
                raise ValueError(f"field {name!r} has shape {arr.shape}, expected ({mesh.nv},) or ({mesh.nv}, 2)")
    return "\n".join(lines) + "\n"


def write_vtk(mesh: Mesh, fields, path, title: str = "tresca_shape mesh") -> None:
    atomic_write_text(path, vtk_text(mesh, fields, title))


def boundary_vtk_text(mesh: Mesh, title: str = "tresca_shape boundary") -> str:
    """POLYDATA of the boundary loop, with the edge tag as cell data."""
    bn = mesh.boundary_nodes
    pts = mesh.vertices[bn]
    nb = len(bn)
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII", "DATASET POLYDATA"]
    lines.append(f"POINTS {nb} double")
    lines.extend(f"{fmt(x)} {fmt(y)} 0" for x, y in pts)
    lines.append(f"LINES {nb} {3 * nb}")
    lines.extend(f"2 {k} {(k + 1) % nb}" for k in range(nb))
    lines.append(f"CELL_DATA {nb}")
    lines.append("SCALARS tag int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(t)) for t in mesh.edge_tags)
    return "\n".join(lines) + "\n"


def write_boundary_vtk(mesh: Mesh, path, title: str = "tresca_shape boundary") -> None:
    atomic_write_text(path, boundary_vtk_text(mesh, title))


def solution_fields(mesh: Mesh, u, state: ContactState, g_values) -> dict:
    """Nodal fields for a solve: displacement, g, sigma_n, s_tau and contact mode.

    Boundary quantities are zero away from the Tresca nodes; ``mode`` is -1 there.
    """
    nodes = state.nodes
    sigma_n = np.zeros(mesh.nv)
    s_tau = np.zeros(mesh.nv)
    mode = np.full(mesh.nv, -1.0)
    sigma_n[nodes] = state.sigma_n
    s_tau[nodes] = state.s_tau
    mode[nodes] = np.asarray(state.mode, dtype=float)
    return {
        "displacement": np.asarray(u, dtype=float),
        "g": np.asarray(g_values, dtype=float),
        "sigma_n": sigma_n,
        "s_tau": s_tau,
        "mode": mode,
    }


# ---------------------------------------------------------------------------
# CSV / JSON


def contact_csv_text(mesh: Mesh, state: ContactState, provenance=None) -> str:
    lines = _comment(provenance) + [CONTACT_HEADER]
    for k, node in enumerate(state.nodes):
        x, y = mesh.vertices[node]
        lines.append(
            ",".join(
                [
                    str(int(node)),
                    fmt(x),
                    fmt(y),
                    str(int(state.mode[k])),
                    fmt(state.sigma_n[k]),
                    fmt(state.s_tau[k]),
                    fmt(state.g[k]),
                    fmt(state.u_tau[k]),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_contact_csv(mesh: Mesh, state: ContactState, path, provenance=None) -> None:
    atomic_write_text(path, contact_csv_text(mesh, state, provenance))


def history_csv_text(history: OptimHistory, provenance=None) -> str:
    lines = _comment(provenance) + [HISTORY_HEADER]
    for k, J, vol, ell, step, sw, ang in history.rows():
        lines.append(",".join([str(k), fmt(J), fmt(vol), fmt(ell), fmt(step), str(sw), fmt(ang)]))
    return "\n".join(lines) + "\n"


def write_history_csv(history: OptimHistory, path, provenance=None) -> None:
    atomic_write_text(path, history_csv_text(history, provenance))


def read_history_csv(path) -> dict:
    """Columns of a history CSV as numpy arrays (comment lines skipped)."""
    with open(path, newline="") as handle:
        rows = list(csv.reader(line for line in handle if not line.startswith("#")))
    header, body = rows[0], rows[1:]
    columns = {}
    for j, name in enumerate(header):
        kind = int if name in ("iter", "switch_iters") else float
        columns[name] = np.array([kind(r[j]) for r in body])
    return columns


def gradcheck_csv_text(rows: list[FDRow], provenance=None) -> str:
    lines = _comment(provenance) + [GRADCHECK_HEADER]
    for r in rows:
        lines.append(
            ",".join(fmt(v) for v in (r.t, r.quotient, r.boundary, r.volume, r.rel_error_boundary, r.rel_error_volume))
        )
    return "\n".join(lines) + "\n"


def write_gradcheck_csv(rows, path, provenance=None) -> None:
    atomic_write_text(path, gradcheck_csv_text(rows, provenance))


def write_json(text: str, path) -> None:
    atomic_write_text(path, text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# MatrixMarket


def matrix_market_text(matrix: sp.spmatrix) -> str:
    """Lower triangle of a symmetric sparse matrix, column-major, 1-based."""
    low = sp.tril(matrix).tocoo()
    order = np.lexsort((low.row, low.col))
    lines = ["%%MatrixMarket matrix coordinate real symmetric", f"{matrix.shape[0]} {matrix.shape[1]} {low.nnz}"]
    lines.extend(f"{low.row[k] + 1} {low.col[k] + 1} {fmt(low.data[k])}" for k in order)
    return "\n".join(lines) + "\n"


def write_matrix_market(path, matrix: sp.spmatrix) -> None:
    atomic_write_text(path, matrix_market_text(matrix))
