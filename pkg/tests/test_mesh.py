import numpy as np
import pytest

from gld.errors import MeshError
from gld.mesh import (BoundaryMarker, build_rectangle_mesh, refine_adaptive,
                      refine_uniform, skeleton_facets)


def unit_mesh(nx, ny):
    return build_rectangle_mesh(1.0, 1.0, nx, ny)


def count_boundary(mesh, marker):
    return sum(1 for f in mesh.facets
               if f.is_boundary and f.boundary_marker is marker)


def test_single_cell_counts():
    mesh = unit_mesh(1, 1)
    assert mesh.n_cells == 1
    assert mesh.n_facets == 4
    assert count_boundary(mesh, BoundaryMarker.DIRICHLET_V) == 2
    assert count_boundary(mesh, BoundaryMarker.NEUMANN_V) == 2


def test_slab_counts():
    mesh = build_rectangle_mesh(80e-9, 40e-9, 8, 4)
    assert mesh.n_cells == 32
    assert mesh.n_facets == 76  # (nx+1)*ny + nx*(ny+1)
    interior = sum(1 for f in mesh.facets if not f.is_boundary)
    assert interior == 52
    assert mesh.n_facets - interior == 24


def test_2x2_counts():
    mesh = unit_mesh(2, 2)
    assert mesh.n_cells == 4
    assert mesh.n_facets == 12
    assert sum(1 for f in mesh.facets if not f.is_boundary) == 4


def test_overlapping_edge_sets_rejected():
    with pytest.raises((MeshError, ValueError)):
        build_rectangle_mesh(1.0, 1.0, 2, 2,
                             dirichlet_edges=("top", "bottom", "left"),
                             neumann_edges=("left", "right"))


def test_refine_uniform_counts():
    mesh = unit_mesh(1, 1)
    assert refine_uniform(mesh).n_cells == 4
    mesh32 = build_rectangle_mesh(80e-9, 40e-9, 8, 4)
    assert refine_uniform(mesh32).n_cells == 128
    twice = refine_uniform(refine_uniform(mesh))
    assert twice.n_cells == 16
    h0 = max(c.diameter for c in mesh.cells)
    h2 = max(c.diameter for c in twice.cells)
    assert np.isclose(h2, h0 / 4.0)


def test_refine_adaptive_all_equals_uniform():
    mesh = unit_mesh(2, 2)
    adapted = refine_adaptive(mesh, range(mesh.n_cells))
    uniform = refine_uniform(mesh)
    assert adapted.n_cells == uniform.n_cells
    ca = sorted((c.x0, c.y0, c.x1, c.y1) for c in adapted.cells)
    cu = sorted((c.x0, c.y0, c.x1, c.y1) for c in uniform.cells)
    assert np.allclose(ca, cu)


def test_refine_adaptive_empty_is_identity():
    mesh = unit_mesh(3, 2)
    out = refine_adaptive(mesh, [])
    assert out.n_cells == mesh.n_cells


def test_refine_adaptive_corner_cell():
    mesh = unit_mesh(2, 2)
    out = refine_adaptive(mesh, [0])
    assert out.n_cells == 7
    # hanging nodes: two coarse neighbors each see two fine sub-facets
    hanging = 0
    for f in out.facets:
        if f.is_boundary:
            continue
        la, lb = (out.cells[c].level for c in f.cells)
        if la != lb:
            hanging += 1
    assert hanging == 4  # 2 hanging facet pairs


def test_one_irregularity_closure():
    mesh = unit_mesh(2, 2)
    for _ in range(3):
        mesh = refine_adaptive(mesh, [0])
        levels = {}
        for f in mesh.facets:
            if f.is_boundary:
                continue
            la, lb = (mesh.cells[c].level for c in f.cells)
            assert abs(la - lb) <= 1
    assert mesh.parent_cells is not None


def test_area_preserved():
    mesh = build_rectangle_mesh(80e-9, 40e-9, 8, 4)
    target = 80e-9 * 40e-9
    for m in (mesh, refine_uniform(mesh), refine_adaptive(mesh, [0, 5])):
        total = sum(c.area for c in m.cells)
        assert abs(total - target) < 1e-13 * target


def test_normals_axis_aligned_unit():
    mesh = refine_adaptive(unit_mesh(2, 2), [3])
    for f in mesh.facets:
        n = np.asarray(f.normal)
        assert abs(np.hypot(*n) - 1.0) < 1e-14
        assert set(np.abs(n)) <= {0.0, 1.0}


def test_skeleton_single_cell_and_2x1():
    assert len(skeleton_facets(unit_mesh(1, 1))) == 4
    mesh = build_rectangle_mesh(2.0, 1.0, 2, 1)
    interior = [f for f in skeleton_facets(mesh) if not f.is_boundary]
    assert len(interior) == 1


def test_skeleton_order_deterministic():
    a = build_rectangle_mesh(1.0, 1.0, 3, 3)
    b = build_rectangle_mesh(1.0, 1.0, 3, 3)
    ma = [f.midpoint for f in skeleton_facets(a)]
    mb = [f.midpoint for f in skeleton_facets(b)]
    assert np.array_equal(np.asarray(ma), np.asarray(mb))
    mids = np.asarray(ma)
    order = np.lexsort((mids[:, 1], mids[:, 0]))
    assert np.array_equal(order, np.arange(len(mids)))
