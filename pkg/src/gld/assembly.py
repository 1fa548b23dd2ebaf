"""HDG assembly: local mixed problems, numerical fluxes, static condensation.

Per cell K the unknowns are coefficient vectors for (V, E1, E2, P1, P2,
U11, U12, U21, U22), each of size m = (k+1)^2; per facet the trace
unknowns are (Vhat, P1hat, P2hat), each of size k+1.  The local equations
are the mixed Poisson and polarization problems with stabilized numerical
fluxes

    (eps*Ehat + Phat) . nu = (eps*E + Phat) . nu + tau_V (V - Vhat),
    Uhat_i . nu            = U_i . nu + tau_P (P_i - Phat_i),

and the skeleton equations weakly enforce single-valuedness of these
fluxes.  Cell unknowns are eliminated by a Schur complement onto the
traces.

Only the implicit Landau term is nonlinear.  The linear part of every cell
block is assembled (and inverted) once per mesh/time-step size; each Newton
iteration updates the condensation through a low-rank (Woodbury) correction
restricted to the polarization coefficients, which keeps the per-iteration
cost at a small multiple of the skeleton solve.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import linalg
from .basis import CellBasis, FacetBasis, gauss_legendre, tensor_quadrature
from .errors import AssemblyError, MeshError
from .mesh import BoundaryMarker, Mesh
from .model import ComponentProperty, MaterialParams, split

__all__ = [
    "DiscreteSpace",
    "StateFields",
    "LocalBlock",
    "CondensedOperator",
    "CondensedSystem",
    "set_stabilization",
    "assemble_local_poisson",
    "assemble_local_polarization",
    "condense",
    "assemble_global",
    "recover_local",
    "solve_poisson_given_p",
    "project_cellwise",
    "project_traces",
    "compute_u_from_p",
]


def set_stabilization(params: MaterialParams, mesh: Mesh):
    """Stabilization constants (tau_V, tau_P) = (eps, 1) / diam(Omega)."""
    d = mesh.diameter
    return params.epsilon / d, 1.0 / d


@dataclass(frozen=True)
class _FacetRec:
    """Tabulated data for one facet of one cell."""

    fid: int
    dof_base: int
    normal: np.ndarray  # outward from this cell
    weights: np.ndarray  # physical quadrature weights (nqf,)
    points: np.ndarray  # physical quadrature points (nqf, 2)
    phi: np.ndarray  # cell basis values at the facet points (m, nqf)
    Mcc: np.ndarray  # (m, m)
    Mct: np.ndarray  # (m, nfb)
    Mtt: np.ndarray  # (nfb, nfb)


class DiscreteSpace:
    """Mesh + bases + quadrature tabulations for one polynomial degree.

    Volume quadrature uses 3k+1 Gauss points per direction so the sextic
    Landau term is integrated exactly; facet terms (all linear) use k+2
    points.
    """

    def __init__(self, mesh: Mesh, degree: int):
        if degree < 1:
            raise AssemblyError(f"polynomial degree must be >= 1, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.cell_basis = CellBasis(degree)
        self.facet_basis = FacetBasis(degree)
        self.m = self.cell_basis.dimension
        self.nfb = self.facet_basis.dimension
        self.n_loc = 9 * self.m
        self.n_cells = mesh.n_cells
        self.n_trace_dofs = 3 * self.nfb * mesh.n_facets

        self._tabulate_volume()
        self._tabulate_facets()
        self._trace_constraint_masks()

    # unknown layout inside a cell block -----------------------------------
    def slices(self):
        m = self.m
        names = ["V", "E1", "E2", "P1", "P2", "U11", "U12", "U21", "U22"]
        return {name: slice(i * m, (i + 1) * m) for i, name in enumerate(names)}

    def p_indices(self):
        m = self.m
        return np.arange(3 * m, 5 * m)

    def facet_dof_base(self, fid: int) -> int:
        return 3 * self.nfb * fid

    def vhat_dofs(self, fid: int):
        base = self.facet_dof_base(fid)
        return np.arange(base, base + self.nfb)

    def phat_dofs(self, fid: int, component: int):
        base = self.facet_dof_base(fid) + (1 + component) * self.nfb
        return np.arange(base, base + self.nfb)

    # tabulation ------------------------------------------------------------
    def _tabulate_volume(self):
        k = self.degree
        rule = tensor_quadrature(gauss_legendre(3 * k + 1))
        self.vol_rule = rule
        phi, dphi = self.cell_basis.eval(rule.points)
        self.phi = phi  # (m, nq), reference values shared by all cells
        nq = rule.weights.size
        nc = self.n_cells
        self.qw = np.empty((nc, nq))
        self.qpts = np.empty((nc, nq, 2))
        self.dphix = np.empty((nc, self.m, nq))
        self.dphiy = np.empty((nc, self.m, nq))
        for c, cell in enumerate(self.mesh.cells):
            jac = 0.25 * cell.hx * cell.hy
            self.qw[c] = rule.weights * jac
            self.qpts[c, :, 0] = 0.5 * (cell.x0 + cell.x1) + 0.5 * cell.hx * rule.points[:, 0]
            self.qpts[c, :, 1] = 0.5 * (cell.y0 + cell.y1) + 0.5 * cell.hy * rule.points[:, 1]
            self.dphix[c] = dphi[:, :, 0] * (2.0 / cell.hx)
            self.dphiy[c] = dphi[:, :, 1] * (2.0 / cell.hy)
        # Cellwise mass and gradient matrices.
        self.M = np.einsum("aq,cq,bq->cab", phi, self.qw, phi, optimize=True)
        self.Gx = np.einsum("caq,cq,bq->cab", self.dphix, self.qw, phi, optimize=True)
        self.Gy = np.einsum("caq,cq,bq->cab", self.dphiy, self.qw, phi, optimize=True)

    def _tabulate_facets(self):
        k = self.degree
        rule = gauss_legendre(k + 2)
        self.facet_rule = rule
        psi, _ = self.facet_basis.eval(rule.points)
        self.psi = psi  # (nfb, nqf)
        mesh = self.mesh
        self.cell_facets = []
        for c, cell in enumerate(mesh.cells):
            recs = []
            for fid, sign in mesh.cell_facets[c]:
                facet = mesh.facets[fid]
                mid = 0.5 * (facet.lo + facet.hi)
                half = 0.5 * facet.length
                s_phys = mid + half * rule.points
                if facet.axis == 0:
                    pts = np.column_stack([np.full_like(s_phys, facet.coord), s_phys])
                else:
                    pts = np.column_stack([s_phys, np.full_like(s_phys, facet.coord)])
                ref = np.column_stack([
                    (2.0 * pts[:, 0] - (cell.x0 + cell.x1)) / cell.hx,
                    (2.0 * pts[:, 1] - (cell.y0 + cell.y1)) / cell.hy,
                ])
                phi_f, _ = self.cell_basis.eval(ref)
                wf = rule.weights * half
                Mcc = (phi_f * wf) @ phi_f.T
                Mct = (phi_f * wf) @ psi.T
                Mtt = (psi * wf) @ psi.T
                normal = sign * np.asarray(facet.normal)
                recs.append(_FacetRec(fid, self.facet_dof_base(fid), normal,
                                      wf, pts, phi_f, Mcc, Mct, Mtt))
            self.cell_facets.append(recs)
        # Reference facet mass (length/2 factored out) for L2 projections.
        self.psi_mass_ref = (psi * rule.weights) @ psi.T

    def _trace_constraint_masks(self):
        constrained = np.zeros(self.n_trace_dofs, dtype=bool)
        for fid, facet in enumerate(self.mesh.facets):
            if not facet.is_boundary:
                continue
            constrained[self.phat_dofs(fid, 0)] = True
            constrained[self.phat_dofs(fid, 1)] = True
            if facet.boundary_marker is BoundaryMarker.DIRICHLET_V:
                constrained[self.vhat_dofs(fid)] = True
        self.constrained = constrained
        self.free = ~constrained
        self.free_map = np.full(self.n_trace_dofs, -1, dtype=np.int64)
        self.free_map[self.free] = np.arange(int(self.free.sum()))
        self.n_free = int(self.free.sum())

    # field evaluation helpers ----------------------------------------------
    def eval_cell_field(self, coeffs, points_ref=None):
        """Field values at the volume quadrature points: (nc, nq)."""
        return np.einsum("ca,aq->cq", coeffs, self.phi, optimize=True)

    def volume_quadrature(self, n1d: int):
        """Physical points/weights and tabulated basis for an n1d^2 rule."""
        rule = tensor_quadrature(gauss_legendre(n1d))
        phi, dphi = self.cell_basis.eval(rule.points)
        nc, nq = self.n_cells, rule.weights.size
        qw = np.empty((nc, nq))
        qpts = np.empty((nc, nq, 2))
        for c, cell in enumerate(self.mesh.cells):
            qw[c] = rule.weights * 0.25 * cell.hx * cell.hy
            qpts[c, :, 0] = 0.5 * (cell.x0 + cell.x1) + 0.5 * cell.hx * rule.points[:, 0]
            qpts[c, :, 1] = 0.5 * (cell.y0 + cell.y1) + 0.5 * cell.hy * rule.points[:, 1]
        return qpts, qw, phi, dphi


@dataclass
class StateFields:
    """Discrete state at one time level.

    ``cell`` has shape (n_cells, 9m) in the layout V, E1, E2, P1, P2,
    U11, U12, U21, U22; ``trace`` has shape (3*(k+1)*n_facets,) in the
    layout Vhat, P1hat, P2hat per facet.
    """

    cell: np.ndarray
    trace: np.ndarray
    time_index: int = 0
    time: float = 0.0

    def field(self, space: DiscreteSpace, name: str):
        return self.cell[:, space.slices()[name]]

    def copy(self):
        return StateFields(self.cell.copy(), self.trace.copy(),
                           self.time_index, self.time)


def zero_state(space: DiscreteSpace) -> StateFields:
    return StateFields(np.zeros((space.n_cells, space.n_loc)),
                       np.zeros(space.n_trace_dofs))


# ---------------------------------------------------------------------------
# local blocks

@dataclass
class LocalBlock:
    """Dense coupling blocks of one cell.

    A: cell-cell, B: cell-trace, C: trace-cell, D: trace-trace (this cell's
    contribution), tdofs: global trace dof indices of the block columns.
    """

    cell_id: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    tdofs: np.ndarray


def _empty_block(space: DiscreteSpace, c: int) -> LocalBlock:
    recs = space.cell_facets[c]
    ntr = 3 * space.nfb * len(recs)
    tdofs = np.concatenate([
        np.arange(r.dof_base, r.dof_base + 3 * space.nfb) for r in recs])
    n = space.n_loc
    return LocalBlock(c, np.zeros((n, n)), np.zeros((n, ntr)),
                      np.zeros((ntr, n)), np.zeros((ntr, ntr)), tdofs)


def assemble_local_poisson(space: DiscreteSpace, params: MaterialParams,
                           c: int, taus=None) -> LocalBlock:
    """Mixed Poisson rows of cell c (E and V equations plus V-hat fluxes)."""
    if taus is None:
        taus = set_stabilization(params, space.mesh)
    tau_v, _ = taus
    eps = params.epsilon
    blk = _empty_block(space, c)
    s = space.slices()
    nfb = space.nfb
    M, Gx, Gy = space.M[c], space.Gx[c], space.Gy[c]

    blk.A[s["E1"], s["E1"]] += M
    blk.A[s["E1"], s["V"]] -= Gx
    blk.A[s["E2"], s["E2"]] += M
    blk.A[s["E2"], s["V"]] -= Gy
    blk.A[s["V"], s["E1"]] -= eps * Gx
    blk.A[s["V"], s["E2"]] -= eps * Gy
    blk.A[s["V"], s["P1"]] -= Gx
    blk.A[s["V"], s["P2"]] -= Gy

    for j, rec in enumerate(space.cell_facets[c]):
        nx, ny = rec.normal
        t0 = 3 * nfb * j
        tv = slice(t0, t0 + nfb)
        tp1 = slice(t0 + nfb, t0 + 2 * nfb)
        tp2 = slice(t0 + 2 * nfb, t0 + 3 * nfb)
        blk.B[s["E1"], tv] += nx * rec.Mct
        blk.B[s["E2"], tv] += ny * rec.Mct
        blk.A[s["V"], s["E1"]] += eps * nx * rec.Mcc
        blk.A[s["V"], s["E2"]] += eps * ny * rec.Mcc
        blk.A[s["V"], s["V"]] += tau_v * rec.Mcc
        blk.B[s["V"], tv] -= tau_v * rec.Mct
        blk.B[s["V"], tp1] += nx * rec.Mct
        blk.B[s["V"], tp2] += ny * rec.Mct
        # transmission rows for Vhat
        blk.C[tv, s["E1"]] += eps * nx * rec.Mct.T
        blk.C[tv, s["E2"]] += eps * ny * rec.Mct.T
        blk.C[tv, s["V"]] += tau_v * rec.Mct.T
        blk.D[tv, tp1] += nx * rec.Mtt
        blk.D[tv, tp2] += ny * rec.Mtt
        blk.D[tv, tv] -= tau_v * rec.Mtt
    return blk


def assemble_local_polarization(space: DiscreteSpace, params: MaterialParams,
                                c: int, dt: float, taus=None) -> LocalBlock:
    """Linear polarization rows of cell c (U and P equations, Uhat fluxes).

    The affine part of DF+ (the 2*alpha+ mass term) is included here; the
    cubic/quintic remainder and its Newton linearization are applied per
    iteration by the condensed operator.
    """
    if taus is None:
        taus = set_stabilization(params, space.mesh)
    _, tau_p = taus
    blk = _empty_block(space, c)
    s = space.slices()
    nfb = space.nfb
    M, Gx, Gy = space.M[c], space.Gx[c], space.Gy[c]
    plus = split(params).plus

    for i, comp in enumerate(params.components):
        u1, u2 = f"U{i+1}1", f"U{i+1}2"
        pi, ei = f"P{i+1}", f"E{i+1}"
        fe = comp.prop is ComponentProperty.FE
        if fe:
            blk.A[s[u1], s[u1]] += M / comp.g
            blk.A[s[u2], s[u2]] += M / comp.g
            blk.A[s[u1], s[pi]] -= Gx
            blk.A[s[u2], s[pi]] -= Gy
        else:
            # dielectric: no gradient energy, force U_i = 0
            blk.A[s[u1], s[u1]] += M
            blk.A[s[u2], s[u2]] += M
        blk.A[s[pi], s[pi]] += (comp.rho_v / dt + 2.0 * plus[i][0]) * M
        blk.A[s[pi], s[ei]] -= M
        blk.A[s[pi], s[u1]] -= Gx
        blk.A[s[pi], s[u2]] -= Gy

        for j, rec in enumerate(space.cell_facets[c]):
            nx, ny = rec.normal
            t0 = 3 * nfb * j
            tp = slice(t0 + (1 + i) * nfb, t0 + (2 + i) * nfb)
            if fe:
                blk.B[s[u1], tp] += nx * rec.Mct
                blk.B[s[u2], tp] += ny * rec.Mct
            blk.A[s[pi], s[u1]] += nx * rec.Mcc
            blk.A[s[pi], s[u2]] += ny * rec.Mcc
            blk.A[s[pi], s[pi]] += tau_p * rec.Mcc
            blk.B[s[pi], tp] -= tau_p * rec.Mct
            # transmission rows for Phat_i
            blk.C[tp, s[u1]] += nx * rec.Mct.T
            blk.C[tp, s[u2]] += ny * rec.Mct.T
            blk.C[tp, s[pi]] += tau_p * rec.Mct.T
            blk.D[tp, tp] -= tau_p * rec.Mtt
    return blk


def assemble_local_linear(space, params, c, dt, taus=None) -> LocalBlock:
    """Full linear cell block: Poisson plus polarization rows."""
    pois = assemble_local_poisson(space, params, c, taus)
    pol = assemble_local_polarization(space, params, c, dt, taus)
    pois.A += pol.A
    pois.B += pol.B
    pois.C += pol.C
    pois.D += pol.D
    return pois


def condense(block: LocalBlock):
    """Schur complement D - C A^{-1} B with recovery data.

    Returns (schur, recovery) where recovery = (lu(A), B) supports
    back-substitution of the cell unknowns.
    """
    try:
        lu = linalg.dense_lu_factor(block.A)
    except linalg.SingularMatrixError as exc:
        raise AssemblyError(
            f"singular local block on cell {block.cell_id}: {exc}") from exc
    AinvB = lu.solve(block.B)
    schur = block.D - block.C @ AinvB
    return schur, (lu, block.B)


def recover_local(recovery, rhs_cell, trace_values):
    """Cell coefficients from trace values: A^{-1} (rhs - B trace)."""
    lu, B = recovery
    return lu.solve(rhs_cell - B @ trace_values)


# ---------------------------------------------------------------------------
# condensed Newton operator

@dataclass
class CondensedSystem:
    """Reduced skeleton system of one Newton iteration."""

    matrix: linalg.SparseMatrix
    rhs: np.ndarray
    ainv_r: np.ndarray  # (nc, n_loc)
    ainv_b: np.ndarray  # (nc, n_loc, ntr_max)
    tdofs: np.ndarray  # (nc, ntr_max) padded with -1


class CondensedOperator:
    """Assembled linear blocks plus the per-iteration nonlinear update.

    Built once per (mesh, params, dt); the expensive inverses of the
    constant cell blocks are reused by every Newton iteration through a
    Woodbury correction on the polarization coefficients.
    """

    def __init__(self, space: DiscreteSpace, params: MaterialParams, dt: float):
        self.space = space
        self.params = params
        self.dt = dt
        self.taus = set_stabilization(params, space.mesh)
        sp = split(params)
        self.beta_plus = np.array([t[1] for t in sp.plus])
        self.gamma_plus = np.array([t[2] for t in sp.plus])
        self.minus = sp.minus
        self._skeleton_lu = None
        self._build_blocks()
        self._build_scatter()

    # -- setup ----------------------------------------------------------
    def _build_blocks(self):
        space, params = self.space, self.params
        nc, n = space.n_cells, space.n_loc
        blocks = [assemble_local_linear(space, params, c, self.dt, self.taus)
                  for c in range(nc)]
        self.ntr = np.array([b.tdofs.size for b in blocks])
        ntr_max = int(self.ntr.max())
        self.ntr_max = ntr_max
        self.A0 = np.zeros((nc, n, n))
        self.B = np.zeros((nc, n, ntr_max))
        self.C = np.zeros((nc, ntr_max, n))
        self.Dcell = np.zeros((nc, ntr_max, ntr_max))
        self.tdofs = np.full((nc, ntr_max), -1, dtype=np.int64)
        for c, b in enumerate(blocks):
            t = b.tdofs.size
            self.A0[c] = b.A
            self.B[c, :, :t] = b.B
            self.C[c, :t] = b.C
            self.Dcell[c, :t, :t] = b.D
            self.tdofs[c, :t] = b.tdofs
        try:
            self.A0inv = np.linalg.inv(self.A0)
        except np.linalg.LinAlgError:
            for c in range(nc):
                try:
                    np.linalg.inv(self.A0[c])
                except np.linalg.LinAlgError:
                    raise AssemblyError(f"singular local block on cell {c}")
            raise
        pidx = space.p_indices()
        self.pidx = pidx
        self.A0iS = self.A0inv[:, :, pidx]  # (nc, n, 2m)
        self.Gred = self.A0iS[:, pidx, :]  # (nc, 2m, 2m)
        self.A0iB = self.A0inv @ self.B
        self.SB = self.A0iB[:, pidx, :]  # (nc, 2m, ntr)
        self.CA0iS = self.C @ self.A0iS  # (nc, ntr, 2m)
        self.Schur0 = self.Dcell - self.C @ self.A0iB

    def _build_scatter(self):
        space = self.space
        nc, ntr = self.tdofs.shape
        rows = np.broadcast_to(self.tdofs[:, :, None], (nc, ntr, ntr)).ravel()
        cols = np.broadcast_to(self.tdofs[:, None, :], (nc, ntr, ntr)).ravel()
        valid = (rows >= 0) & (cols >= 0)
        rr = np.where(rows >= 0, space.free_map[rows], -1)
        cc = np.where(cols >= 0, space.free_map[cols], -1)
        keep = valid & (rr >= 0) & (cc >= 0)
        self._sc_keep = keep
        self._sc_rows = rr[keep]
        self._sc_cols = cc[keep]
        # padded-trace gather: map -1 to a trailing zero slot
        self.tdofs_gather = np.where(self.tdofs >= 0, self.tdofs,
                                     space.n_trace_dofs)

    # -- per-iteration pieces --------------------------------------------
    def p_at_quadrature(self, cell_coeffs):
        """(P1, P2) values at the volume quadrature points, each (nc, nq)."""
        s = self.space.slices()
        p1 = self.space.eval_cell_field(cell_coeffs[:, s["P1"]])
        p2 = self.space.eval_cell_field(cell_coeffs[:, s["P2"]])
        return p1, p2

    def _nonlinear_residual_term(self, pq):
        """Cubic/quintic part of DF+ tested against the cell basis: (nc, m)."""
        out = []
        for i, p in enumerate(pq):
            b, g = self.beta_plus[i], self.gamma_plus[i]
            val = p**3 * (4.0 * b + 6.0 * g * p * p)
            out.append(np.einsum("cq,aq->ca", self.space.qw * val, self.space.phi,
                                 optimize=True))
        return out

    def _nonlinear_jacobian(self, pq):
        """Woodbury block: weighted-mass Jacobian of the nonlinear term."""
        nc = self.space.n_cells
        m = self.space.m
        D = np.zeros((nc, 2 * m, 2 * m))
        for i, p in enumerate(pq):
            b, g = self.beta_plus[i], self.gamma_plus[i]
            w2 = p * p * (12.0 * b + 30.0 * g * p * p)
            Di = np.einsum("aq,cq,bq->cab", self.space.phi, self.space.qw * w2,
                           self.space.phi, optimize=True)
            D[:, i * m:(i + 1) * m, i * m:(i + 1) * m] = Di
        return D

    def gather_traces(self, trace):
        ext = np.concatenate([trace, [0.0]])
        return ext[self.tdofs_gather]  # (nc, ntr_max)

    def residual(self, cell_coeffs, trace, rhs_cell):
        """Cell and free-trace residuals of the nonlinear system."""
        space = self.space
        lam = self.gather_traces(trace)
        r_cell = (np.einsum("cab,cb->ca", self.A0, cell_coeffs, optimize=True)
                  + np.einsum("cat,ct->ca", self.B, lam, optimize=True)
                  - rhs_cell)
        pq = self.p_at_quadrature(cell_coeffs)
        s = space.slices()
        nl = self._nonlinear_residual_term(pq)
        r_cell[:, s["P1"]] += nl[0]
        r_cell[:, s["P2"]] += nl[1]
        contrib = (np.einsum("cta,ca->ct", self.C, cell_coeffs, optimize=True)
                   + np.einsum("cts,cs->ct", self.Dcell, lam, optimize=True))
        r_tr = np.zeros(space.n_trace_dofs + 1)
        np.add.at(r_tr, self.tdofs_gather, contrib)
        r_tr = r_tr[:-1]
        return r_cell, r_tr[space.free]

    def assemble_global(self, cell_coeffs, trace, rhs_cell) -> CondensedSystem:
        """Condensed Newton system at the given iterate."""
        space = self.space
        r_cell, r_free = self.residual(cell_coeffs, trace, rhs_cell)
        pq = self.p_at_quadrature(cell_coeffs)
        Dnl = self._nonlinear_jacobian(pq)
        m2 = 2 * self.space.m
        eye = np.eye(m2)
        K = eye[None, :, :] + Dnl @ self.Gred
        try:
            W = np.linalg.solve(K, Dnl)
        except np.linalg.LinAlgError as exc:
            raise AssemblyError(f"Woodbury update failed: {exc}") from exc
        # A^{-1} r and A^{-1} B with A = A0 + S Dnl S^T
        h = np.einsum("cab,cb->ca", self.A0inv, r_cell, optimize=True)
        ainv_r = h - np.einsum("cap,cpq,cq->ca", self.A0iS, W, h[:, self.pidx],
                               optimize=True)
        WSB = W @ self.SB
        ainv_b = self.A0iB - self.A0iS @ WSB
        schur = self.Schur0 + self.CA0iS @ WSB
        # skeleton residual reduced by the cell solve
        ctr = np.einsum("cta,ca->ct", self.C, ainv_r, optimize=True)
        s_tr = np.zeros(space.n_trace_dofs + 1)
        np.add.at(s_tr, self.tdofs_gather, ctr)
        rhs = -(r_free - s_tr[:-1][space.free])
        vals = schur.ravel()[self._sc_keep]
        mat = scipy.sparse.coo_matrix(
            (vals, (self._sc_rows, self._sc_cols)),
            shape=(space.n_free, space.n_free)).tocsr()
        return CondensedSystem(linalg.SparseMatrix(mat), rhs,
                               ainv_r, ainv_b, self.tdofs)

    def newton_direction(self, cell_coeffs, trace, rhs_cell, reuse=False):
        """One Newton direction (d_cell, d_trace) at the given iterate.

        With ``reuse`` the previously factored skeleton matrix serves as a
        preconditioner for a Krylov solve of the current one, which avoids
        refactoring inside a Newton loop whose Jacobian changes little; the
        exact factorization is rebuilt whenever the Krylov solve stalls.
        """
        sys = self.assemble_global(cell_coeffs, trace, rhs_cell)
        d_free = None
        if reuse and self._skeleton_lu is not None:
            d_free = self._try_preconditioned(sys)
        if d_free is None:
            self._skeleton_lu = linalg.sparse_lu_factor(sys.matrix)
            d_free = self._skeleton_lu.solve(sys.rhs)
        d_trace = np.zeros(self.space.n_trace_dofs)
        d_trace[self.space.free] = d_free
        lam = np.concatenate([d_trace, [0.0]])[self.tdofs_gather]
        d_cell = -(sys.ainv_r + np.einsum("cat,ct->ca", sys.ainv_b, lam,
                                          optimize=True))
        return d_cell, d_trace

    def _try_preconditioned(self, sys):
        """Solve the skeleton system with the cached LU as preconditioner.

        Returns None (forcing a fresh factorization) when the stale
        preconditioner needs too many Krylov iterations.
        """
        mat = sys.matrix.to_scipy()
        lu = self._skeleton_lu
        precond = scipy.sparse.linalg.LinearOperator(mat.shape, matvec=lu.solve)
        count = [0]

        def cb(_):
            count[0] += 1

        sol, info = scipy.sparse.linalg.gmres(
            mat, sys.rhs, M=precond, rtol=1e-10,
            atol=1e-300, restart=30, maxiter=1,
            callback=cb, callback_type="pr_norm")
        if info != 0:
            return None
        if count[0] > 15:
            # converged but the preconditioner is getting stale
            self._skeleton_lu = None
        return sol


def assemble_global(space, params, dt, cell_coeffs, trace, rhs_cell):
    """Convenience wrapper: condensed system from raw inputs."""
    op = CondensedOperator(space, params, dt)
    return op.assemble_global(cell_coeffs, trace, rhs_cell)


# ---------------------------------------------------------------------------
# right-hand sides and projections

def build_rhs(space: DiscreteSpace, params: MaterialParams, dt: float,
              prev_cell: np.ndarray, t_n: float,
              charge: Optional[Callable] = None,
              forcing: Optional[Callable] = None) -> np.ndarray:
    """Per-cell right-hand side of one time step.

    ``charge(x, y)`` is the electric charge density; ``forcing(t, x, y)``
    returns the two manufactured forcing components.
    """
    s = space.slices()
    minus = split(params).minus
    rhs = np.zeros((space.n_cells, space.n_loc))
    x, y = space.qpts[:, :, 0], space.qpts[:, :, 1]
    if charge is not None:
        rho = charge(x, y)
        rhs[:, s["V"]] = np.einsum("cq,aq->ca", space.qw * rho, space.phi,
                                   optimize=True)
    gvals = forcing(t_n, x, y) if forcing is not None else None
    for i, comp in enumerate(params.components):
        p_prev = space.eval_cell_field(prev_cell[:, s[f"P{i+1}"]])
        a, b, g = minus[i]
        val = p_prev * (2.0 * a + p_prev**2 * (4.0 * b + 6.0 * g * p_prev**2))
        if comp.prop is ComponentProperty.FE:
            val = val + (comp.rho_v / dt) * p_prev
        if gvals is not None:
            val = val + gvals[i]
        rhs[:, s[f"P{i+1}"]] = np.einsum("cq,aq->ca", space.qw * val, space.phi,
                                         optimize=True)
    return rhs


def project_cellwise(space: DiscreteSpace, fn: Callable) -> np.ndarray:
    """Cellwise L2 projection of fn(x, y) onto the cell basis: (nc, m)."""
    x, y = space.qpts[:, :, 0], space.qpts[:, :, 1]
    vals = np.broadcast_to(fn(x, y), x.shape)
    b = np.einsum("cq,aq->ca", space.qw * vals, space.phi, optimize=True)
    return np.linalg.solve(space.M, b[:, :, None])[:, :, 0]

def project_on_facet(space: DiscreteSpace, fid: int, fn: Callable) -> np.ndarray:
    """L2 projection of fn(x, y) onto the trace basis of one facet."""
    facet = space.mesh.facets[fid]
    rule = space.facet_rule
    mid = 0.5 * (facet.lo + facet.hi)
    s_phys = mid + 0.5 * facet.length * rule.points
    if facet.axis == 0:
        x, y = np.full_like(s_phys, facet.coord), s_phys
    else:
        x, y = s_phys, np.full_like(s_phys, facet.coord)
    vals = np.broadcast_to(fn(x, y), s_phys.shape)
    b = (space.psi * rule.weights) @ vals
    return np.linalg.solve(space.psi_mass_ref, b)


def project_traces(space: DiscreteSpace, fn: Callable) -> np.ndarray:
    """Facetwise L2 projection of a scalar function onto every facet."""
    out = np.zeros((space.mesh.n_facets, space.nfb))
    for fid in range(space.mesh.n_facets):
        out[fid] = project_on_facet(space, fid, fn)
    return out


def apply_trace_constraints(space: DiscreteSpace, trace: np.ndarray,
                            bias_fn: Optional[Callable] = None,
                            p_boundary_fn: Optional[Callable] = None):
    """Set constrained trace coefficients in place.

    ``bias_fn(x, y)`` gives the potential on Dirichlet facets (default 0);
    ``p_boundary_fn(x, y)`` gives (P1, P2) on boundary facets (default 0,
    the physical condition).
    """
    for fid, facet in enumerate(space.mesh.facets):
        if not facet.is_boundary:
            continue
        if facet.boundary_marker is BoundaryMarker.DIRICHLET_V:
            if bias_fn is None:
                trace[space.vhat_dofs(fid)] = 0.0
            else:
                trace[space.vhat_dofs(fid)] = project_on_facet(space, fid, bias_fn)
        if p_boundary_fn is None:
            trace[space.phat_dofs(fid, 0)] = 0.0
            trace[space.phat_dofs(fid, 1)] = 0.0
        else:
            trace[space.phat_dofs(fid, 0)] = project_on_facet(
                space, fid, lambda x, y: p_boundary_fn(x, y)[0])
            trace[space.phat_dofs(fid, 1)] = project_on_facet(
                space, fid, lambda x, y: p_boundary_fn(x, y)[1])
    return trace


# ---------------------------------------------------------------------------
# Poisson sub-solve (the discrete solution operator V = Phi(rho - div P))

def solve_poisson_given_p(space: DiscreteSpace, params: MaterialParams,
                          p_cell: np.ndarray, trace: np.ndarray,
                          charge: Optional[Callable] = None):
    """Solve the HDG Poisson problem with the polarization as data.

    ``p_cell`` is (nc, 2, m); ``trace`` supplies the constrained Vhat and
    Phat values (free Vhat entries are solved for, Phat is data).  Returns
    (v_cell (nc, m), e_cell (nc, 2, m), trace_out) with the solved Vhat.
    """
    taus = set_stabilization(params, space.mesh)
    s = space.slices()
    m, nfb = space.m, space.nfb
    nloc = 3 * m  # V, E1, E2
    sub = {"V": slice(0, m), "E1": slice(m, 2 * m), "E2": slice(2 * m, 3 * m)}
    full = ["V", "E1", "E2"]

    # Vhat-only skeleton numbering
    nf = space.mesh.n_facets
    vfree = np.zeros(nf * nfb, dtype=bool)
    for fid, facet in enumerate(space.mesh.facets):
        if facet.is_boundary and facet.boundary_marker is BoundaryMarker.DIRICHLET_V:
            continue
        vfree[fid * nfb:(fid + 1) * nfb] = True
    vmap = np.full(nf * nfb, -1, dtype=np.int64)
    vmap[vfree] = np.arange(int(vfree.sum()))

    rows, cols, vals = [], [], []
    rhs_sk = np.zeros(int(vfree.sum()))
    recov = []
    for c in range(space.n_cells):
        blk = assemble_local_poisson(space, params, c, taus)
        idx = np.concatenate([np.arange(s[name].start, s[name].stop)
                              for name in full])
        A = blk.A[np.ix_(idx, idx)]
        # data contributions: cell P and trace Phat (plus constrained Vhat)
        recs = space.cell_facets[c]
        ntr = 3 * nfb * len(recs)
        lam = np.concatenate([trace[np.arange(r.dof_base, r.dof_base + 3 * nfb)]
                              for r in recs])
        p_cols = np.concatenate([np.arange(s["P1"].start, s["P1"].stop),
                                 np.arange(s["P2"].start, s["P2"].stop)])
        pvec = p_cell[c].ravel()
        b_loc = -(blk.A[np.ix_(idx, p_cols)] @ pvec)
        if charge is not None:
            x = space.qpts[c, :, 0]
            y = space.qpts[c, :, 1]
            rho = np.broadcast_to(charge(x, y), x.shape)
            b_loc[sub["V"]] += (space.phi * (space.qw[c] * rho)).sum(axis=1)
        # split trace columns into Vhat unknowns vs data
        vhat_local = []  # (local col in reduced B, global vdof)
        Bv = np.zeros((nloc, len(recs) * nfb))
        bdata = b_loc.copy()
        for j, rec in enumerate(recs):
            t0 = 3 * nfb * j
            vcols = np.arange(t0, t0 + nfb)
            pcols_t = np.arange(t0 + nfb, t0 + 3 * nfb)
            bdata -= blk.B[np.ix_(idx, pcols_t)] @ lam[pcols_t]
            gdofs = np.arange(rec.dof_base, rec.dof_base + nfb)
            constrained = ~vfree[rec.fid * nfb:(rec.fid + 1) * nfb]
            Bv[:, j * nfb:(j + 1) * nfb] = blk.B[np.ix_(idx, vcols)]
            vhat_local.append((j, rec.fid, constrained, gdofs))
        lu = linalg.dense_lu_factor(A)
        AinvB = lu.solve(Bv)
        Ainvb = lu.solve(bdata)
        # trace rows (Vhat only)
        Cv = np.zeros((len(recs) * nfb, nloc))
        Dv = np.zeros((len(recs) * nfb, len(recs) * nfb))
        tr_b = np.zeros(len(recs) * nfb)
        for j, rec in enumerate(recs):
            t0 = 3 * nfb * j
            rr = slice(j * nfb, (j + 1) * nfb)
            Cv[rr, :] = blk.C[t0:t0 + nfb, idx]
            Dv[rr, rr] = blk.D[t0:t0 + nfb, t0:t0 + nfb]
            # Phat data terms in the Vhat transmission rows
            pcols_t = np.arange(t0 + nfb, t0 + 3 * nfb)
            tr_b[rr] -= blk.D[t0:t0 + nfb, pcols_t] @ lam[pcols_t]
        schur = Dv - Cv @ AinvB
        srhs = tr_b - Cv @ Ainvb
        vdofs = np.concatenate([rec.fid * nfb + np.arange(nfb)
                                for rec in recs])
        vred = vmap[vdofs]
        vhat_vals = np.array([trace[space.vhat_dofs(rec.fid)] for rec in recs]).ravel()
        for a_loc, ra in enumerate(vred):
            if ra < 0:
                continue
            rhs_sk[ra] += srhs[a_loc]
            for b_loc2, cb in enumerate(vred):
                if cb < 0:
                    # constrained column: move to RHS
                    rhs_sk[ra] -= schur[a_loc, b_loc2] * vhat_vals[b_loc2]
                else:
                    rows.append(ra)
                    cols.append(cb)
                    vals.append(schur[a_loc, b_loc2])
        recov.append((lu, Bv, bdata, vdofs, idx))

    mat = scipy.sparse.coo_matrix(
        (vals, (rows, cols)), shape=(rhs_sk.size, rhs_sk.size)).tocsr()
    sol = linalg.sparse_lu_factor(linalg.SparseMatrix(mat)).solve(rhs_sk)

    vhat = np.zeros(nf * nfb)
    for fid, facet in enumerate(space.mesh.facets):
        gdofs = fid * nfb + np.arange(nfb)
        red = vmap[gdofs]
        if red[0] >= 0:
            vhat[gdofs] = sol[red]
        else:
            vhat[gdofs] = trace[space.vhat_dofs(fid)]

    v_cell = np.zeros((space.n_cells, m))
    e_cell = np.zeros((space.n_cells, 2, m))
    trace_out = trace.copy()
    for fid in range(nf):
        trace_out[space.vhat_dofs(fid)] = vhat[fid * nfb:(fid + 1) * nfb]
    for c, (lu, Bv, bdata, vdofs, idx) in enumerate(recov):
        xloc = lu.solve(bdata - Bv @ vhat[vdofs])
        v_cell[c] = xloc[sub["V"]]
        e_cell[c, 0] = xloc[sub["E1"]]
        e_cell[c, 1] = xloc[sub["E2"]]
    return v_cell, e_cell, trace_out


def compute_u_from_p(space: DiscreteSpace, params: MaterialParams,
                     p_cell: np.ndarray, trace: np.ndarray) -> np.ndarray:
    """Mixed gradient reconstruction U_i = -g_i grad P_i from cell/trace data.

    Solves the local mass systems (U_i/g_i, W) = (P_i, div W) - <Phat_i, W.nu>.
    Returns (nc, 2, 2, m); dielectric components give zero.
    """
    s = space.slices()
    nfb = space.nfb
    out = np.zeros((space.n_cells, 2, 2, space.n_loc // 9))
    for c in range(space.n_cells):
        Minv = np.linalg.inv(space.M[c])
        for i, comp in enumerate(params.components):
            if comp.prop is not ComponentProperty.FE:
                continue
            pi = p_cell[c, i]
            bx = space.Gx[c] @ pi
            by = space.Gy[c] @ pi
            for rec in space.cell_facets[c]:
                phat = trace[rec.dof_base + (1 + i) * nfb:
                             rec.dof_base + (2 + i) * nfb]
                bx -= rec.normal[0] * (rec.Mct @ phat)
                by -= rec.normal[1] * (rec.Mct @ phat)
            out[c, i, 0] = comp.g * (Minv @ bx)
            out[c, i, 1] = comp.g * (Minv @ by)
    return out
