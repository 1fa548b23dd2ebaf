"""Artifact writers: atomic text output, CSV tables, legacy VTK files."""

import os
import tempfile
from typing import Optional

import numpy as np

from .assembly import DiscreteSpace, StateFields
from .scaling import Scaling, identity_scaling

__all__ = ["atomic_write_text", "write_vtk"]


def atomic_write_text(path, text: str):
    """Write a text file atomically (temp file + rename) with LF newlines."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-",
                               suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_vtk(space: DiscreteSpace, state: StateFields, path,
              scaling: Optional[Scaling] = None, title: str = "gld fields"):
    """Legacy ASCII VTK unstructured-grid snapshot.

    Emits the mesh as quad cells with cell-centered data: the potential V,
    the vector fields E and P, and the scalar curl(P) = dP2/dx - dP1/dy
    evaluated at each cell center.  With a ``scaling`` the geometry and
    fields are converted back to SI units.
    """
    sc = scaling or identity_scaling()
    mesh = space.mesh
    s = space.slices()
    # cell-center values: evaluate the local polynomials at (0, 0)
    center = np.zeros((1, 2))
    phi0, grad0 = space.cell_basis.eval(center)  # (m,1), (m,1,2)
    phi0 = phi0[:, 0]
    gx0, gy0 = grad0[:, 0, 0], grad0[:, 0, 1]

    def at_center(name):
        return state.cell[:, s[name]] @ phi0

    v = at_center("V") * sc.voltage
    e1 = at_center("E1") * sc.electric_field_factor
    e2 = at_center("E2") * sc.electric_field_factor
    p1 = at_center("P1") * sc.polarization
    p2 = at_center("P2") * sc.polarization
    # reference gradients scaled by the cell Jacobian, then to SI
    hx = np.array([c.hx for c in mesh.cells])
    hy = np.array([c.hy for c in mesh.cells])
    dp2dx = (state.cell[:, s["P2"]] @ gx0) * 2.0 / hx
    dp1dy = (state.cell[:, s["P1"]] @ gy0) * 2.0 / hy
    curl = (dp2dx - dp1dy) * sc.polarization / sc.length

    lines = ["# vtk DataFile Version 3.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(mesh.vertices)} double"]
    for x, y in mesh.vertices:
        lines.append(f"{x * sc.length:.10e} {y * sc.length:.10e} 0.0")
    lines.append(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}")
    for cell in mesh.cells:
        sw, se, nw, ne = cell.vertex_ids
        lines.append(f"4 {sw} {se} {ne} {nw}")
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend(["9"] * mesh.n_cells)
    lines.append(f"CELL_DATA {mesh.n_cells}")

    def scalar(name, vals):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{val:.10e}" for val in vals)

    def vector(name, a, b):
        lines.append(f"VECTORS {name} double")
        lines.extend(f"{x:.10e} {y:.10e} 0.0" for x, y in zip(a, b))

    scalar("V", v)
    vector("E", e1, e2)
    vector("P", p1, p2)
    scalar("curl_P", curl)
    atomic_write_text(path, "\n".join(lines) + "\n")
