"""Semi-implicit time stepping for the gradient-flow model.

Each step solves the convex-implicit / concave-explicit system with Newton's
method on the statically condensed skeleton unknowns.  The splitting makes
the discrete energy nonincreasing step by step regardless of the step size;
``run`` asserts this and records the energy history.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .assembly import (CondensedOperator, DiscreteSpace, StateFields,
                       apply_trace_constraints, build_rhs, compute_u_from_p,
                       project_cellwise, solve_poisson_given_p, zero_state)
from .errors import DivergenceError, StabilityViolationError, StepError
from .model import ComponentProperty, MaterialParams, landau_F

__all__ = [
    "NewtonOptions",
    "TimeLoopConfig",
    "EnergyRecord",
    "StepReport",
    "project_initial",
    "complete_initial_state",
    "discrete_energy",
    "step",
    "run",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NewtonOptions:
    abs_tol: float = 1e-11
    rel_tol: float = 1e-10
    max_iter: int = 30
    max_backtracks: int = 5


@dataclass(frozen=True)
class TimeLoopConfig:
    """Uniform time grid tau = T/N plus the Newton and energy-check knobs."""

    final_time: float
    step_count: int
    newton: NewtonOptions = NewtonOptions()
    energy_check: bool = True
    energy_tolerance: float = 1e-10

    def __post_init__(self):
        if not self.final_time > 0:
            raise ValueError(f"final_time must be positive, got {self.final_time}")
        if self.step_count < 1:
            raise ValueError(f"step_count must be >= 1, got {self.step_count}")
        if not (self.energy_tolerance > 0 and self.newton.abs_tol > 0
                and self.newton.rel_tol > 0):
            raise ValueError("tolerances must be positive")

    @property
    def tau(self) -> float:
        return self.final_time / self.step_count


@dataclass
class EnergyRecord:
    """Per-step history of the run: discrete energy density d_h(P^n), the
    total enthalpy, and the Newton iteration count / final residual of the
    step that produced each state (zeros for the initial state)."""

    time_index: List[int] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    totals: List[float] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)

    def append(self, index, t, density, total, iterations=0, residual=0.0):
        self.time_index.append(int(index))
        self.times.append(float(t))
        self.values.append(float(density))
        self.totals.append(float(total))
        self.iterations.append(int(iterations))
        self.residuals.append(float(residual))

    def max_increase(self) -> float:
        v = np.asarray(self.values)
        if v.size < 2:
            return 0.0
        return float(np.max(np.diff(v)))


@dataclass
class StepReport:
    iterations: int
    residual: float
    backtracks: int = 0
    history: List[float] = field(default_factory=list)  # residual per iterate


def project_initial(space: DiscreteSpace, p_fn: Callable) -> np.ndarray:
    """Cellwise L2 projection of the initial polarization: (nc, 2, m)."""
    p = np.empty((space.n_cells, 2, space.m))
    p[:, 0] = project_cellwise(space, lambda x, y: p_fn(x, y)[0])
    p[:, 1] = project_cellwise(space, lambda x, y: p_fn(x, y)[1])
    return p


def complete_initial_state(space: DiscreteSpace, params: MaterialParams,
                           p_fn: Callable,
                           bias_fn: Optional[Callable] = None,
                           p_boundary_fn: Optional[Callable] = None,
                           charge: Optional[Callable] = None,
                           t0: float = 0.0) -> StateFields:
    """Admissible initial state from a polarization field.

    Projects P cellwise, sets the constrained traces, solves the Poisson
    problem for (V, E, Vhat) and reconstructs U from the mixed gradient
    equation so the state satisfies every non-dynamic discrete equation.
    """
    state = zero_state(space)
    s = space.slices()
    p = project_initial(space, p_fn)
    state.cell[:, s["P1"]] = p[:, 0]
    state.cell[:, s["P2"]] = p[:, 1]
    apply_trace_constraints(space, state.trace, bias_fn, p_boundary_fn)
    # polarization traces on interior facets: single-valued L2 projections
    from .assembly import project_on_facet
    nfb = space.nfb
    for fid, facet in enumerate(space.mesh.facets):
        if facet.is_boundary:
            continue
        state.trace[space.phat_dofs(fid, 0)] = project_on_facet(
            space, fid, lambda x, y: p_fn(x, y)[0])
        state.trace[space.phat_dofs(fid, 1)] = project_on_facet(
            space, fid, lambda x, y: p_fn(x, y)[1])
    v, e, trace = solve_poisson_given_p(space, params, p, state.trace, charge)
    state.trace = trace
    state.cell[:, s["V"]] = v
    state.cell[:, s["E1"]] = e[:, 0]
    state.cell[:, s["E2"]] = e[:, 1]
    u = compute_u_from_p(space, params, p, state.trace)
    state.cell[:, s["U11"]] = u[:, 0, 0]
    state.cell[:, s["U12"]] = u[:, 0, 1]
    state.cell[:, s["U21"]] = u[:, 1, 0]
    state.cell[:, s["U22"]] = u[:, 1, 1]
    state.time = t0
    state.time_index = 0
    return state


def discrete_energy(space: DiscreteSpace, params: MaterialParams,
                    state: StateFields) -> float:
    """Mean discrete energy density

    (1/|Omega|) int eps/2 |grad V_h|^2 + sum_i F_i(P_i) + |U_i|^2/(2 g_i)

    with grad V_h = -E_h and U_i the mixed gradient unknown.
    """
    s = space.slices()
    e1 = space.eval_cell_field(state.cell[:, s["E1"]])
    e2 = space.eval_cell_field(state.cell[:, s["E2"]])
    dens = 0.5 * params.epsilon * (e1 * e1 + e2 * e2)
    for i, comp in enumerate(params.components):
        p = space.eval_cell_field(state.cell[:, s[f"P{i+1}"]])
        dens = dens + landau_F(params, i, p)
        if comp.prop is ComponentProperty.FE:
            u1 = space.eval_cell_field(state.cell[:, s[f"U{i+1}1"]])
            u2 = space.eval_cell_field(state.cell[:, s[f"U{i+1}2"]])
            dens = dens + (u1 * u1 + u2 * u2) / (2.0 * comp.g)
    total = float(np.sum(space.qw * dens))
    return total / space.mesh.total_area()


def step(op: CondensedOperator, state: StateFields, t_next: float,
         bias_fn: Optional[Callable] = None,
         p_boundary_fn: Optional[Callable] = None,
         charge: Optional[Callable] = None,
         forcing: Optional[Callable] = None,
         options: NewtonOptions = NewtonOptions()):
    """Advance one time step; returns (new_state, StepReport)."""
    space = op.space
    rhs = build_rhs(space, op.params, op.dt, state.cell, t_next,
                    charge=charge, forcing=forcing)
    new = state.copy()
    new.time = t_next
    new.time_index = state.time_index + 1
    bias_t = None if bias_fn is None else (lambda x, y: bias_fn(t_next, x, y))
    pb_t = None if p_boundary_fn is None else (
        lambda x, y: p_boundary_fn(t_next, x, y))
    apply_trace_constraints(space, new.trace, bias_t, pb_t)

    def norm(rc, rt):
        return float(np.sqrt(np.sum(rc * rc) + np.sum(rt * rt)))

    r_cell, r_free = op.residual(new.cell, new.trace, rhs)
    res = norm(r_cell, r_free)
    res0 = res
    backtracks = 0
    history = [res]
    for it in range(options.max_iter):
        if not np.isfinite(res):
            raise DivergenceError(
                f"non-finite Newton residual at t={t_next:g}", residual=res)
        if res <= options.abs_tol + options.rel_tol * res0:
            return new, StepReport(it, res, backtracks, history)
        d_cell, d_trace = op.newton_direction(new.cell, new.trace, rhs,
                                              reuse=True)
        scale = 1.0
        for bt in range(options.max_backtracks + 1):
            trial_cell = new.cell + scale * d_cell
            trial_trace = new.trace + scale * d_trace
            rc, rf = op.residual(trial_cell, trial_trace, rhs)
            trial_res = norm(rc, rf)
            if np.isfinite(trial_res) and (trial_res < res or bt == options.max_backtracks):
                break
            scale *= 0.5
            backtracks += 1
        new.cell, new.trace, res = trial_cell, trial_trace, trial_res
        history.append(res)
    if res <= options.abs_tol + options.rel_tol * res0:
        return new, StepReport(options.max_iter, res, backtracks, history)
    raise StepError(
        f"Newton did not converge at t={t_next:g} "
        f"(residual {res:.3e} after {options.max_iter} iterations)",
        residual=res)


def run(space: DiscreteSpace, params: MaterialParams, state: StateFields,
        dt: float, n_steps: int,
        bias_fn: Optional[Callable] = None,
        p_boundary_fn: Optional[Callable] = None,
        charge: Optional[Callable] = None,
        forcing: Optional[Callable] = None,
        options: NewtonOptions = NewtonOptions(),
        check_energy: bool = True,
        energy_tolerance: float = 1e-10,
        callback: Optional[Callable] = None):
    """March ``n_steps`` steps of size ``dt``; returns (state, EnergyRecord).

    With ``check_energy`` the run raises StabilityViolationError if the
    discrete energy density increases by more than
    energy_tolerance * (1 + |d_h^0|) over a step.  Energy monitoring only makes sense with autonomous data
    (no forcing, time-constant bias), which is the caller's responsibility.
    """
    from .verification import total_energy
    op = CondensedOperator(space, params, dt)
    record = EnergyRecord()
    d0 = discrete_energy(space, params, state)
    record.append(state.time_index, state.time, d0,
                  total_energy(space, params, state, charge))
    tol = energy_tolerance * (1.0 + abs(d0))
    prev_energy = d0
    if callback is not None:
        callback(state, None)
    for n in range(n_steps):
        t_next = state.time + dt
        state, report = step(op, state, t_next, bias_fn, p_boundary_fn,
                             charge, forcing, options)
        energy = discrete_energy(space, params, state)
        record.append(state.time_index, state.time, energy,
                      total_energy(space, params, state, charge),
                      report.iterations, report.residual)
        if check_energy and energy > prev_energy + tol:
            raise StabilityViolationError(
                f"energy increased at step {n + 1}: "
                f"{prev_energy!r} -> {energy!r}", step=n + 1)
        prev_energy = energy
        if callback is not None:
            callback(state, report)
        if (n + 1) % max(1, n_steps // 10) == 0:
            log.debug("step %d/%d: energy %.6e, newton %d its",
                      n + 1, n_steps, energy, report.iterations)
    return state, record
