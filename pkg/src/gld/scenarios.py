"""The four packaged scenarios.

Two manufactured-solution convergence studies (refinement in time and in
space), the zero-bias relaxation run that monitors the discrete energy, and
the triangle-bias hysteresis run with estimator-driven mesh adaptation.

SI scenarios are solved in nondimensional units (see ``scaling``) and the
artifacts are converted back to SI on output.
"""

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .assembly import (CondensedOperator, DiscreteSpace, StateFields,
                       set_stabilization)
from .config import ScenarioConfig, bias_at
from .mesh import build_rectangle_mesh, refine_adaptive, refine_uniform
from .model import MaterialParams
from .output import atomic_write_text, write_vtk
from .scaling import Scaling, identity_scaling, nondimensionalize, scaling_for
from .stepper import (EnergyRecord, NewtonOptions, complete_initial_state,
                      discrete_energy, run, step)
from .verification import (ConvergenceTable, ManufacturedSolution,
                           kelly_estimate, l2_errors, select_refinement,
                           total_energy, traces_from_cells,
                           transfer_cell_fields, transmission_residual)

__all__ = [
    "ScenarioResult",
    "displacement_flux",
    "run_convergence",
    "run_energy_stability",
    "run_hysteresis",
    "run_scenario",
]


@dataclass
class ScenarioResult:
    """Everything a caller (CLI or test) needs from a finished scenario."""

    scenario: str
    files: List[str] = field(default_factory=list)
    tables: Dict[int, ConvergenceTable] = field(default_factory=dict)
    record: Optional[EnergyRecord] = None
    transmission: Dict[int, float] = field(default_factory=dict)
    sampled_states: List[StateFields] = field(default_factory=list)
    space: Optional[DiscreteSpace] = None
    params: Optional[MaterialParams] = None
    scaling: Optional[Scaling] = None
    # hysteresis series (SI units)
    times: List[float] = field(default_factory=list)
    bias: List[float] = field(default_factory=list)
    d_top: List[float] = field(default_factory=list)
    d_bottom: List[float] = field(default_factory=list)
    current_top: List[float] = field(default_factory=list)


def _total_dofs(space: DiscreteSpace) -> int:
    return space.n_cells * 9 * space.m + space.n_trace_dofs


def _write_rows(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def displacement_flux(space: DiscreteSpace, params: MaterialParams,
                      state: StateFields, edge: str) -> float:
    """Displacement flux through a boundary edge of the rectangle,

        integral over S of (eps Ehat + Phat) . nu ds,

    with the stabilized numerical flux (eps E + Phat) . nu + tau_V (V - Vhat)
    taken from the adjacent cell and nu the outward domain normal.
    """
    mesh = space.mesh
    xs = [c.x0 for c in mesh.cells] + [c.x1 for c in mesh.cells]
    ys = [c.y0 for c in mesh.cells] + [c.y1 for c in mesh.cells]
    target = {"left": (0, min(xs)), "right": (0, max(xs)),
              "bottom": (1, min(ys)), "top": (1, max(ys))}[edge]
    axis, coord = target
    tau_v, _ = set_stabilization(params, mesh)
    s = space.slices()
    nfb = space.nfb
    eps = params.epsilon
    total = 0.0
    for c, recs in enumerate(space.cell_facets):
        for rec in recs:
            facet = mesh.facets[rec.fid]
            if not facet.is_boundary or facet.axis != axis:
                continue
            if abs(facet.coord - coord) > 1e-12 * (1.0 + abs(coord)):
                continue
            nx, ny = rec.normal
            base = rec.dof_base
            e1 = state.cell[c, s["E1"]] @ rec.phi
            e2 = state.cell[c, s["E2"]] @ rec.phi
            vv = state.cell[c, s["V"]] @ rec.phi
            vhat = state.trace[base:base + nfb] @ space.psi
            p1hat = state.trace[base + nfb:base + 2 * nfb] @ space.psi
            p2hat = state.trace[base + 2 * nfb:base + 3 * nfb] @ space.psi
            flux = (eps * (nx * e1 + ny * e2) + nx * p1hat + ny * p2hat
                    + tau_v * (vv - vhat))
            total += float(np.sum(rec.weights * flux))
    return total


# ---------------------------------------------------------------------------
# manufactured convergence scenarios

def _manufactured_level(ms: ManufacturedSolution, space: DiscreteSpace,
                        final_time: float, n_steps: int,
                        sample_transmission: Optional[Dict[int, float]] = None):
    """Run the manufactured problem on one mesh/step-size combination."""
    params = ms.params
    bias = lambda t, x, y: ms.v(t, x, y)
    pbnd = lambda t, x, y: ms.p(t, x, y)
    state = complete_initial_state(
        space, params, lambda x, y: ms.p(0.0, x, y),
        bias_fn=lambda x, y: ms.v(0.0, x, y),
        p_boundary_fn=lambda x, y: ms.p(0.0, x, y))
    dt = final_time / n_steps
    sample_at = {1, max(1, (n_steps + 1) // 2), n_steps}

    def cb(st, report):
        if report is None or sample_transmission is None:
            return
        if st.time_index in sample_at:
            sample_transmission[st.time_index] = transmission_residual(
                space, params, st)

    state, _ = run(space, params, state, dt, n_steps, bias_fn=bias,
                   p_boundary_fn=pbnd, forcing=ms.forcing,
                   check_energy=False, callback=cb)
    return state, l2_errors(space, state, ms.exact_fields(final_time))


def run_convergence(cfg: ScenarioConfig, refine: str,
                    out_dir: Optional[str] = None) -> ScenarioResult:
    """Convergence table refining either the step size or the mesh.

    ``refine="tau"``: fixed mesh, step size halved per level.
    ``refine="h"``: mesh refined uniformly per level with the step size
    divided by 2^(k+1), so the first-order time error tracks the O(h^{k+1})
    space error.
    """
    ms = ManufacturedSolution(cfg.material)
    k = cfg.discretization.degree
    T = cfg.discretization.final_time
    mesh = build_rectangle_mesh(cfg.mesh.width, cfg.mesh.height,
                                cfg.mesh.nx, cfg.mesh.ny,
                                dirichlet_edges=cfg.mesh.dirichlet_edges,
                                neumann_edges=cfg.mesh.neumann_edges)
    result = ScenarioResult(scenario=f"convergence_{'time' if refine == 'tau' else 'space'}")
    table = ConvergenceTable(parameter=refine)
    space = DiscreteSpace(mesh, k)
    n0 = cfg.discretization.steps
    for level in range(cfg.mesh.levels):
        if refine == "tau":
            n_steps = n0 * 2**level
        else:
            if level > 0:
                mesh = refine_uniform(mesh)
                space = DiscreteSpace(mesh, k)
            n_steps = n0 * (2**(k + 1))**level
        last = level == cfg.mesh.levels - 1
        _, errs = _manufactured_level(
            ms, space, T, n_steps,
            sample_transmission=result.transmission if last else None)
        h = max(c.diameter for c in mesh.cells)
        table.add_level(h, T / n_steps, _total_dofs(space), errs)
    result.tables[k] = table
    result.space = space
    result.params = cfg.material
    result.scaling = identity_scaling()
    if out_dir is not None:
        path = os.path.join(out_dir, f"{result.scenario}_k{k}.csv")
        table.write_csv(path + ".tmp")
        os.replace(path + ".tmp", path)
        result.files.append(path)
    return result


# ---------------------------------------------------------------------------
# monolayer scenarios

def _monolayer_setup(cfg: ScenarioConfig):
    """Nondimensionalized mesh, material and initial polarization."""
    scaling = scaling_for(cfg.material, cfg.mesh.width, cfg.mesh.height,
                          cfg.discretization.final_time)
    params = nondimensionalize(cfg.material, scaling)
    w = cfg.mesh.width / scaling.length
    h = cfg.mesh.height / scaling.length
    mesh = build_rectangle_mesh(w, h, cfg.mesh.nx, cfg.mesh.ny,
                                dirichlet_edges=cfg.mesh.dirichlet_edges,
                                neumann_edges=cfg.mesh.neumann_edges)
    xsplit = 0.5 * w

    def p0(x, y):
        val = np.where(np.asarray(x) <= xsplit, 0.1, -0.1) / scaling.polarization
        return (val, np.copy(val))

    return scaling, params, mesh, p0


def run_energy_stability(cfg: ScenarioConfig,
                         out_dir: Optional[str] = None) -> ScenarioResult:
    """Zero-bias relaxation from the split +-0.1 polarization state.

    Emits the per-step energy series and field snapshots at the half and
    final times; the run itself asserts that the discrete energy density is
    nonincreasing step by step.
    """
    scaling, params, mesh, p0 = _monolayer_setup(cfg)
    space = DiscreteSpace(mesh, cfg.discretization.degree)
    n_steps = cfg.discretization.steps
    state = complete_initial_state(space, params, p0)
    result = ScenarioResult(scenario="energy_stability")
    result.space, result.params, result.scaling = space, params, scaling

    sample_at = {1, max(1, (n_steps + 1) // 2), n_steps}
    keep_every = max(1, n_steps // 20)
    snapshot_at = {n_steps // 2, n_steps}
    cadence = cfg.output.cadence
    snapshots = []

    def cb(st, report):
        if report is None:
            return
        n = st.time_index
        if n in sample_at:
            result.transmission[n] = transmission_residual(space, params, st)
        if n % keep_every == 0:
            result.sampled_states.append(st.copy())
        if n in snapshot_at or (cadence and n % cadence == 0):
            snapshots.append((n, st.copy()))

    state, record = run(space, params, state, 1.0 / n_steps, n_steps,
                        check_energy=True, callback=cb)
    result.record = record

    if out_dir is not None:
        efac = scaling.energy_density_factor
        area = scaling.length**2
        rows = [(record.time_index[i],
                 f"{record.times[i] * scaling.time:.9e}",
                 f"{record.values[i] * efac:.12e}",
                 f"{record.totals[i] * efac * area:.12e}",
                 record.iterations[i],
                 f"{record.residuals[i]:.6e}")
                for i in range(len(record.times))]
        path = os.path.join(out_dir, "energy_stability.csv")
        _write_rows(path, ["step", "time_s", "energy_density_J_per_m3",
                           "total_energy_J", "newton_iterations",
                           "newton_residual"], rows)
        result.files.append(path)
        for n, st in snapshots:
            vtk = os.path.join(out_dir, f"energy_stability_{n:05d}.vtk")
            write_vtk(space, st, vtk, scaling=scaling)
            result.files.append(vtk)
    return result


def run_hysteresis(cfg: ScenarioConfig,
                   out_dir: Optional[str] = None) -> ScenarioResult:
    """Triangle-bias sweep recording the displacement flux at the contacts.

    The top contact follows the configured waveform, the bottom contact is
    grounded.  With ``mesh.adaptive`` the mesh is refined every
    ``refine_every`` steps by splitting the ``fraction`` of cells with the
    largest potential-gradient jump indicator; fields are carried over by
    polynomial evaluation on the child cells.
    """
    scaling, params, mesh, p0 = _monolayer_setup(cfg)
    k = cfg.discretization.degree
    space = DiscreteSpace(mesh, k)
    n_steps = cfg.discretization.steps
    dt = 1.0 / n_steps
    T = cfg.discretization.final_time
    y_top = max(c.y1 for c in mesh.cells)

    def bias_fn(t, x, y):
        volts = bias_at(cfg.signal, t * scaling.time)
        v_nd = scaling.bias(volts)
        return np.where(np.asarray(y) >= y_top - 1e-12, v_nd, 0.0)

    state = complete_initial_state(space, params, p0,
                                   bias_fn=lambda x, y: bias_fn(0.0, x, y))
    result = ScenarioResult(scenario="hysteresis")
    result.scaling = scaling
    op = CondensedOperator(space, params, dt)
    dfac = scaling.displacement_factor
    tau_si = T / n_steps
    sample_at = {1, max(1, (n_steps + 1) // 2), n_steps}
    cadence = cfg.output.cadence
    snapshots = []

    d_prev = displacement_flux(space, params, state, "top") * dfac
    for n in range(1, n_steps + 1):
        t_next = n * dt
        state, report = step(op, state, t_next, bias_fn=bias_fn)
        t_si = t_next * scaling.time
        d_top = displacement_flux(space, params, state, "top") * dfac
        d_bot = displacement_flux(space, params, state, "bottom") * dfac
        result.times.append(t_si)
        result.bias.append(bias_at(cfg.signal, t_si))
        result.d_top.append(d_top)
        result.d_bottom.append(d_bot)
        result.current_top.append((d_top - d_prev) / tau_si)
        d_prev = d_top
        if n in sample_at:
            result.transmission[n] = transmission_residual(space, params, state)
        if cadence and n % cadence == 0:
            snapshots.append((n, space, state.copy()))
        if (cfg.mesh.adaptive and n % cfg.mesh.refine_every == 0
                and n < n_steps):
            eta = kelly_estimate(space, state)
            flagged = select_refinement(eta, cfg.mesh.fraction)
            new_mesh = refine_adaptive(space.mesh, flagged)
            new_space = DiscreteSpace(new_mesh, k)
            cell = transfer_cell_fields(space, new_space, state.cell)
            trace = traces_from_cells(
                new_space, cell,
                bias_fn=lambda x, y: bias_fn(t_next, x, y))
            state = StateFields(cell, trace, state.time_index, state.time)
            space = new_space
            op = CondensedOperator(space, params, dt)
    result.space, result.params = space, params

    if out_dir is not None:
        path = os.path.join(out_dir, "hysteresis.csv")
        rows = [(f"{result.bias[i]:.9e}", f"{result.d_top[i]:.12e}",
                 f"{result.d_bottom[i]:.12e}")
                for i in range(len(result.times))]
        _write_rows(path, ["bias_V", "D_top_C_per_m", "D_bottom_C_per_m"],
                    rows)
        result.files.append(path)
        cpath = os.path.join(out_dir, "hysteresis_current.csv")
        crows = [(f"{result.times[i]:.9e}", f"{result.current_top[i]:.12e}")
                 for i in range(len(result.times))]
        _write_rows(cpath, ["time_s", "current_top_A_per_m"], crows)
        result.files.append(cpath)
        for n, sp, st in snapshots:
            vtk = os.path.join(out_dir, f"hysteresis_{n:05d}.vtk")
            write_vtk(sp, st, vtk, scaling=scaling)
            result.files.append(vtk)
    return result


def run_scenario(cfg: ScenarioConfig,
                 out_dir: Optional[str] = None) -> ScenarioResult:
    """Dispatch a validated configuration to its scenario driver."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if cfg.scenario == "convergence_time":
        return run_convergence(cfg, "tau", out_dir)
    if cfg.scenario == "convergence_space":
        return run_convergence(cfg, "h", out_dir)
    if cfg.scenario == "energy_stability":
        return run_energy_stability(cfg, out_dir)
    if cfg.scenario == "hysteresis":
        return run_hysteresis(cfg, out_dir)
    raise ValueError(f"unknown scenario {cfg.scenario!r}")
