import csv
import io
import math

import numpy as np
import pytest

from gld.assembly import DiscreteSpace, zero_state
from gld.mesh import build_rectangle_mesh, refine_adaptive, refine_uniform
from gld.stepper import complete_initial_state, project_initial
from gld.verification import (ConvergenceTable, ManufacturedSolution,
                              kelly_estimate, l2_errors, manufactured_forcing,
                              monolithic_step, observed_orders,
                              select_refinement, traces_from_cells,
                              transfer_cell_fields)


def unit_params():
    return ManufacturedSolution.default_params()


# ---------------------------------------------------------------------------
# manufactured solution

def test_exact_fields_consistency():
    ms = ManufacturedSolution(unit_params())
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, 40)
    y = rng.uniform(0, 1, 40)
    t = 0.07
    # P = grad V and E = -P (finite differences)
    h = 1e-6
    dvx = (ms.v(t, x + h, y) - ms.v(t, x - h, y)) / (2 * h)
    dvy = (ms.v(t, x, y + h) - ms.v(t, x, y - h)) / (2 * h)
    p1, p2 = ms.p(t, x, y)
    e1, e2 = ms.e(t, x, y)
    assert np.max(np.abs(p1 - dvx)) < 1e-6
    assert np.max(np.abs(p2 - dvy)) < 1e-6
    assert np.max(np.abs(e1 + p1)) == 0.0 and np.max(np.abs(e2 + p2)) == 0.0
    # U_i = -g grad P_i
    u = ms.u(t, x, y)
    dp1x = (ms.p(t, x + h, y)[0] - ms.p(t, x - h, y)[0]) / (2 * h)
    dp1y = (ms.p(t, x, y + h)[0] - ms.p(t, x, y - h)[0]) / (2 * h)
    assert np.max(np.abs(u[0][0] + dp1x)) < 1e-5
    assert np.max(np.abs(u[0][1] + dp1y)) < 1e-5


def test_potential_vanishes_on_contacts_and_flux_on_sides():
    ms = ManufacturedSolution(unit_params())
    x = np.linspace(0, 1, 11)
    assert np.max(np.abs(ms.v(0.3, x, np.zeros_like(x)))) < 1e-15
    assert np.max(np.abs(ms.v(0.3, x, np.ones_like(x)))) < 1e-15
    # (eps E + P) vanishes identically (eps = 1, E = -P), so the normal
    # flux on the left/right edges is zero
    rng = np.random.default_rng(1)
    xr, yr = rng.uniform(0, 1, 50), rng.uniform(0, 1, 50)
    p1, p2 = ms.p(0.1, xr, yr)
    e1, e2 = ms.e(0.1, xr, yr)
    assert np.max(np.abs(e1 + p1)) < 1e-14
    assert np.max(np.abs(e2 + p2)) < 1e-14


def test_reference_forcing_frozen_value():
    """Value of the unit-coefficient reference forcing at t=0,
    (x, y) = (1/4, 1/4): independently derived closed form
    3 pi/2 + pi^3/2 - 3 pi^5/16."""
    params = unit_params()  # alpha = -1, beta = -1, gamma = 1
    g1, g2 = manufactured_forcing(params, 0.0, 0.25, 0.25)
    want = -37.16316357670567
    assert np.isclose(float(g1), want, rtol=1e-13)
    assert np.isclose(float(g2), want, rtol=1e-13)
    via_ms = ManufacturedSolution(params).forcing_reference_convention(
        0.0, 0.25, 0.25)
    assert np.isclose(float(via_ms[0]), want, rtol=1e-13)


def test_solver_forcing_frozen_value_and_sign_relation():
    """The forcing of the evolution actually stepped (Landau derivative with
    the opposite sign) equals the reference forcing with negated Landau
    coefficients."""
    params = unit_params()
    f1, f2 = ManufacturedSolution(params).forcing(0.0, 0.25, 0.25)
    want = 40.30475623029547
    assert np.isclose(float(f1), want, rtol=1e-13)
    assert np.isclose(float(f2), want, rtol=1e-13)
    from gld.model import ComponentParams, ComponentProperty, MaterialParams
    from helpers import unchecked
    comp = unchecked(ComponentParams, alpha=1.0, beta=1.0, gamma=-1.0,
                     g=1.0, rho_v=1.0, prop=ComponentProperty.FE)
    neg = unchecked(MaterialParams, epsilon=1.0, components=(comp, comp))
    g1, g2 = manufactured_forcing(neg, 0.0, 0.25, 0.25)
    assert np.isclose(float(g1), want, rtol=1e-13)


def test_forcing_decays_in_time():
    ms = ManufacturedSolution(unit_params())
    x = y = np.array([0.25])
    f0 = abs(float(ms.forcing(0.0, x, y)[0][0]))
    f1 = abs(float(ms.forcing(1.0, x, y)[0][0]))
    assert f1 < 1e-8 * f0


# ---------------------------------------------------------------------------
# errors and orders

def test_l2_error_of_zero_state_is_exact_norm():
    """For the zero state at t = 0 the V error is ||V||_L2 = 1/2."""
    mesh = build_rectangle_mesh(1.0, 1.0, 8, 8)
    space = DiscreteSpace(mesh, 2)
    ms = ManufacturedSolution(unit_params())
    state = zero_state(space)
    errs = l2_errors(space, state, ms.exact_fields(0.0))
    assert np.isclose(errs["V"], 0.5, rtol=1e-10)


def test_l2_errors_vanish_for_represented_fields():
    mesh = build_rectangle_mesh(1.0, 1.0, 3, 2)
    for k in (1, 2):
        space = DiscreteSpace(mesh, k)
        state = zero_state(space)
        s = space.slices()
        fields = {
            "V": lambda x, y: x + 2 * y,
            "E1": lambda x, y: x - y, "E2": lambda x, y: 1.0 + 0 * x,
            "P1": lambda x, y: 0.5 * y, "P2": lambda x, y: x,
            "U11": lambda x, y: 0 * x, "U12": lambda x, y: x + y,
            "U21": lambda x, y: 2 * x, "U22": lambda x, y: y - 1,
        }
        from gld.assembly import project_cellwise
        for name, fn in fields.items():
            state.cell[:, s[name]] = project_cellwise(space, fn)
        errs = l2_errors(space, state, fields)
        assert max(errs.values()) < 1e-12


def test_observed_orders():
    assert np.isclose(observed_orders([1.0, 0.25], [1.0, 0.5])[0], 2.0)
    assert np.isclose(observed_orders([1.0, 0.5], [1.0, 0.5])[0], 1.0)
    o = observed_orders([1.0, 0.25, 0.0625], [1.0, 0.5, 0.25])
    assert np.allclose(o, [2.0, 2.0])


def test_convergence_table_csv_schema():
    table = ConvergenceTable(parameter="tau")
    errs1 = {"V": 1e-2, "E": 2e-2, "P": 3e-2, "U": 4e-2}
    errs2 = {k: v / 4 for k, v in errs1.items()}
    table.add_level(0.5, 0.1, 100, errs1)
    table.add_level(0.5, 0.05, 100, errs2)
    buf = io.StringIO()
    import tempfile, os
    fd, path = tempfile.mkstemp(suffix=".csv")
    os.close(fd)
    try:
        table.write_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
    finally:
        os.unlink(path)
    assert rows[0] == ["level", "h", "tau", "dofs",
                       "err_V", "err_E", "err_P", "err_U",
                       "ord_V", "ord_E", "ord_P", "ord_U"]
    assert rows[1][0] == "0" and rows[2][0] == "1"
    assert rows[1][8:] == ["", "", "", ""]  # no order on the first level
    assert float(rows[2][4]) == pytest.approx(2.5e-3)
    assert float(rows[2][8]) == pytest.approx(2.0, abs=1e-4)
    # orders are measured against tau here
    assert float(rows[1][2]) == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# estimator, marking, transfer

def test_kelly_zero_for_continuous_gradient():
    mesh = refine_adaptive(build_rectangle_mesh(1.0, 1.0, 2, 2), [1])
    space = DiscreteSpace(mesh, 1)
    state = zero_state(space)
    s = space.slices()
    from gld.assembly import project_cellwise
    state.cell[:, s["E1"]] = project_cellwise(space, lambda x, y: 0.0 * x)
    state.cell[:, s["E2"]] = project_cellwise(space, lambda x, y: -1.0 + 0 * x)
    eta = kelly_estimate(space, state)
    assert np.max(eta) < 1e-13


def test_kelly_single_cell_is_zero():
    mesh = build_rectangle_mesh(1.0, 1.0, 1, 1)
    space = DiscreteSpace(mesh, 1)
    state = zero_state(space)
    s = space.slices()
    state.cell[:, s["E1"]] = np.random.default_rng(0).standard_normal(space.m)
    eta = kelly_estimate(space, state)
    assert eta.shape == (1,) and eta[0] == 0.0


def test_kelly_decreases_under_refinement():
    ms = ManufacturedSolution(unit_params())

    def eta_max(mesh):
        space = DiscreteSpace(mesh, 1)
        state = zero_state(space)
        s = space.slices()
        from gld.assembly import project_cellwise
        state.cell[:, s["E1"]] = project_cellwise(
            space, lambda x, y: ms.e(0.0, x, y)[0])
        state.cell[:, s["E2"]] = project_cellwise(
            space, lambda x, y: ms.e(0.0, x, y)[1])
        return float(np.max(kelly_estimate(space, state)))

    coarse = build_rectangle_mesh(1.0, 1.0, 4, 4)
    fine = refine_uniform(coarse)
    assert eta_max(fine) < 0.5 * eta_max(coarse)


def test_select_refinement():
    eta = np.array([0.1, 0.5, 0.3, 0.5])
    assert list(select_refinement(eta, 1.0)) == [0, 1, 2, 3]
    # ceil(0.01 * 100) = 1 cell
    eta100 = np.linspace(0.0, 1.0, 100)
    assert list(select_refinement(eta100, 0.01)) == [99]
    # tie between cells 1 and 3: the lower id wins
    assert list(select_refinement(eta, 0.25)) == [1]
    assert list(select_refinement(eta, 0.5)) == [1, 3]
    assert select_refinement(eta, 0.0).size == 0


def test_transfer_cell_fields_reproduces_polynomials():
    coarse = build_rectangle_mesh(1.0, 1.0, 2, 2)
    fine = refine_adaptive(coarse, [0, 3])
    for k in (1, 2):
        sp_c = DiscreteSpace(coarse, k)
        sp_f = DiscreteSpace(fine, k)
        fn = lambda x, y: (x - 0.2) ** k + y
        coeffs = np.empty((sp_c.n_cells, 9 * sp_c.m))
        from gld.assembly import project_cellwise
        block = project_cellwise(sp_c, fn)
        for f in range(9):
            coeffs[:, f * sp_c.m:(f + 1) * sp_c.m] = block
        out = transfer_cell_fields(sp_c, sp_f, coeffs)
        x, y = sp_f.qpts[:, :, 0], sp_f.qpts[:, :, 1]
        vals = sp_f.eval_cell_field(out[:, :sp_f.m])
        assert np.max(np.abs(vals - fn(x, y))) < 1e-12


def test_traces_from_cells_matches_continuous_field():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    space = DiscreteSpace(mesh, 2)
    from gld.assembly import project_cellwise
    s = space.slices()
    cell = np.zeros((space.n_cells, 9 * space.m))
    v_fn = lambda x, y: x * x - y
    cell[:, s["V"]] = project_cellwise(space, v_fn)
    trace = traces_from_cells(space, cell)
    # on interior facets Vhat is the facet projection of the continuous field
    for fid, facet in enumerate(space.mesh.facets):
        if facet.is_boundary:
            continue
        for c, recs in enumerate(space.cell_facets):
            for rec in recs:
                if rec.fid != fid:
                    continue
                vals = trace[space.vhat_dofs(fid)] @ space.psi
                x, y = rec.points[:, 0], rec.points[:, 1]
                assert np.max(np.abs(vals - v_fn(x, y))) < 1e-12


# ---------------------------------------------------------------------------
# monolithic oracle

def test_monolithic_zero_data_gives_zero():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    space = DiscreteSpace(mesh, 1)
    params = unit_params()
    state = zero_state(space)
    out = monolithic_step(space, params, 0.1, state, 0.1)
    assert np.max(np.abs(out.cell)) < 1e-12
    assert np.max(np.abs(out.trace)) < 1e-12


def test_monolithic_refuses_large_meshes():
    mesh = build_rectangle_mesh(1.0, 1.0, 10, 10)
    space = DiscreteSpace(mesh, 1)
    from gld.errors import AssemblyError
    with pytest.raises(AssemblyError):
        monolithic_step(space, unit_params(), 0.1, zero_state(space), 0.1)
