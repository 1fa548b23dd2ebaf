"""Axis-aligned quadrilateral meshes of rectangular domains.

Meshes are immutable after construction.  Refinement (uniform or adaptive
quad-refinement with 1-irregular hanging nodes) returns a new mesh; the
``parent_cells`` array maps each new cell to the cell it came from, which
field transfer uses.

Hanging-node policy: the facet skeleton is built from the *fine* side, so a
coarse cell with a refined neighbor sees two sub-facets on that edge.  Trace
unknowns live on these fine facets and the coarse cell integrates its
boundary terms facet by facet.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigurationError, MeshError

__all__ = [
    "BoundaryMarker",
    "Cell",
    "Facet",
    "Mesh",
    "EDGE_NAMES",
    "build_rectangle_mesh",
    "refine_uniform",
    "refine_adaptive",
    "skeleton_facets",
]

EDGE_NAMES = ("left", "right", "bottom", "top")


class BoundaryMarker(Enum):
    DIRICHLET_V = "dirichlet_v"
    NEUMANN_V = "neumann_v"


@dataclass(frozen=True)
class Cell:
    """Axis-aligned rectangular cell with its refinement level."""

    x0: float
    y0: float
    x1: float
    y1: float
    level: int
    vertex_ids: tuple  # (SW, SE, NW, NE)

    @property
    def hx(self) -> float:
        return self.x1 - self.x0

    @property
    def hy(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.hx * self.hy

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.hx, self.hy))


@dataclass(frozen=True)
class Facet:
    """Straight facet of the skeleton.

    ``axis`` is 0 for vertical facets (constant x) and 1 for horizontal
    ones.  ``cells`` holds (first, second) adjacent cell ids; the normal
    points out of the first cell.  Boundary facets have ``cells[1] is None``
    and carry a potential marker; the polarization trace is constrained on
    every boundary facet.
    """

    endpoints: tuple  # vertex ids
    axis: int
    coord: float  # the constant coordinate of the facet line
    lo: float
    hi: float
    cells: tuple
    normal: tuple
    boundary_marker: Optional[BoundaryMarker]

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self):
        mid = 0.5 * (self.lo + self.hi)
        return (self.coord, mid) if self.axis == 0 else (mid, self.coord)

    @property
    def is_boundary(self) -> bool:
        return self.cells[1] is None


class Mesh:
    """Immutable quadrilateral mesh with facet skeleton.

    Facets are ordered lexicographically by midpoint for deterministic
    assembly.  ``cell_facets[c]`` lists (facet_id, sign) pairs where
    ``sign * facet.normal`` is the outward normal of cell ``c``.
    """

    def __init__(self, rects, levels, extent, dirichlet_edges, neumann_edges,
                 parent_cells=None):
        self.domain_extent = (float(extent[0]), float(extent[1]))
        self.dirichlet_edges = frozenset(dirichlet_edges)
        self.neumann_edges = frozenset(neumann_edges)
        _check_edge_sets(self.dirichlet_edges, self.neumann_edges)
        self.parent_cells = None if parent_cells is None else np.asarray(parent_cells)
        self._build(rects, levels)

    # -- construction ---------------------------------------------------

    def _build(self, rects, levels):
        width, height = self.domain_extent
        vertex_index = {}
        vertices = []

        def vid(x, y):
            key = (x, y)
            if key not in vertex_index:
                vertex_index[key] = len(vertices)
                vertices.append(key)
            return vertex_index[key]

        cells = []
        for (x0, y0, x1, y1), lev in zip(rects, levels):
            if not (x1 > x0 and y1 > y0):
                raise MeshError(f"cell with nonpositive area: {(x0, y0, x1, y1)}")
            ids = (vid(x0, y0), vid(x1, y0), vid(x0, y1), vid(x1, y1))
            cells.append(Cell(x0, y0, x1, y1, int(lev), ids))
        self.cells = cells

        # Group cell edges by the line they lie on.  Key: (axis, coord).
        lines = {}
        for c, cell in enumerate(cells):
            lines.setdefault((0, cell.x0), []).append((cell.y0, cell.y1, c, +1))
            lines.setdefault((0, cell.x1), []).append((cell.y0, cell.y1, c, -1))
            lines.setdefault((1, cell.y0), []).append((cell.x0, cell.x1, c, +1))
            lines.setdefault((1, cell.y1), []).append((cell.x0, cell.x1, c, -1))

        facets = []
        for (axis, coord), segs in lines.items():
            breaks = np.unique([s[0] for s in segs] + [s[1] for s in segs])
            # Cover each elementary interval from both sides.
            pieces = []
            for lo, hi in zip(breaks[:-1], breaks[1:]):
                mid = 0.5 * (lo + hi)
                neg = pos = None
                for slo, shi, c, side in segs:
                    if slo < mid < shi:
                        # side == -1: the cell lies on the negative side of
                        # the line (its upper/right edge is on the line).
                        if side < 0:
                            neg = c
                        else:
                            pos = c
                if neg is None and pos is None:
                    continue
                pieces.append((lo, hi, neg, pos))
            # Merge adjacent pieces with identical adjacency (an unrelated
            # breakpoint elsewhere on the line must not split a facet).
            merged = []
            for piece in pieces:
                if merged and merged[-1][2:] == piece[2:] and merged[-1][1] == piece[0]:
                    merged[-1] = (merged[-1][0], piece[1], piece[2], piece[3])
                else:
                    merged.append(piece)
            for lo, hi, neg, pos in merged:
                marker = None
                if neg is None or pos is None:
                    if axis == 0:
                        edge = "left" if coord == 0.0 else "right"
                        if not (coord == 0.0 or coord == width):
                            raise MeshError(f"one-sided interior facet at x={coord}")
                    else:
                        edge = "bottom" if coord == 0.0 else "top"
                        if not (coord == 0.0 or coord == height):
                            raise MeshError(f"one-sided interior facet at y={coord}")
                    marker = (BoundaryMarker.DIRICHLET_V
                              if edge in self.dirichlet_edges
                              else BoundaryMarker.NEUMANN_V)
                first = neg if neg is not None else pos
                second = pos if neg is not None else None
                sign = 1.0 if neg is not None else -1.0
                normal = (sign, 0.0) if axis == 0 else (0.0, sign)
                if axis == 0:
                    eps = (vid(coord, lo), vid(coord, hi))
                else:
                    eps = (vid(lo, coord), vid(hi, coord))
                facets.append(Facet(eps, axis, coord, lo, hi,
                                    (first, second), normal, marker))

        facets.sort(key=lambda f: f.midpoint)
        self.facets = facets
        self.vertices = np.array(vertices, dtype=float)

        cell_facets = [[] for _ in cells]
        for fid, facet in enumerate(facets):
            cell_facets[facet.cells[0]].append((fid, +1.0))
            if facet.cells[1] is not None:
                cell_facets[facet.cells[1]].append((fid, -1.0))
        self.cell_facets = [tuple(cf) for cf in cell_facets]

        for cf in self.cell_facets:
            if len(cf) < 4:
                raise MeshError("cell with fewer than 4 facets")

    # -- queries ---------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def diameter(self) -> float:
        """Bounding-box diagonal of the domain."""
        w, h = self.domain_extent
        return float(np.hypot(w, h))

    def total_area(self) -> float:
        return float(sum(c.area for c in self.cells))

    def interior_facets(self):
        return [i for i, f in enumerate(self.facets) if not f.is_boundary]

    def boundary_facets(self):
        return [i for i, f in enumerate(self.facets) if f.is_boundary]

    def edge_adjacent_levels(self):
        """(level_first, level_second) for every interior facet."""
        out = []
        for f in self.facets:
            if f.cells[1] is not None:
                out.append((self.cells[f.cells[0]].level,
                            self.cells[f.cells[1]].level))
        return out


def _check_edge_sets(dirichlet, neumann):
    overlap = set(dirichlet) & set(neumann)
    if overlap:
        raise ConfigurationError(
            f"edges {sorted(overlap)} are in both the Dirichlet and Neumann sets")
    union = set(dirichlet) | set(neumann)
    unknown = union - set(EDGE_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown edge names: {sorted(unknown)}")
    missing = set(EDGE_NAMES) - union
    if missing:
        raise ConfigurationError(
            f"edges {sorted(missing)} carry no boundary marker")
    if not dirichlet:
        raise ConfigurationError("the Dirichlet set must not be empty")


def build_rectangle_mesh(width, height, nx, ny,
                         dirichlet_edges=("bottom", "top"),
                         neumann_edges=("left", "right")) -> Mesh:
    """Uniform nx-by-ny mesh of (0,width) x (0,height)."""
    if width <= 0 or height <= 0:
        raise ConfigurationError("domain extent must be positive")
    if nx < 1 or ny < 1:
        raise ConfigurationError("cell counts must be >= 1")
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    rects = []
    for j in range(ny):
        for i in range(nx):
            rects.append((xs[i], ys[j], xs[i + 1], ys[j + 1]))
    return Mesh(rects, [0] * len(rects), (width, height),
                dirichlet_edges, neumann_edges)


def _split(cell: Cell):
    xm = 0.5 * (cell.x0 + cell.x1)
    ym = 0.5 * (cell.y0 + cell.y1)
    return [
        (cell.x0, cell.y0, xm, ym),
        (xm, cell.y0, cell.x1, ym),
        (cell.x0, ym, xm, cell.y1),
        (xm, ym, cell.x1, cell.y1),
    ]


def _refine_once(mesh: Mesh, flagged) -> Mesh:
    flagged = set(flagged)
    rects, levels, parents = [], [], []
    for c, cell in enumerate(mesh.cells):
        if c in flagged:
            for child in _split(cell):
                rects.append(child)
                levels.append(cell.level + 1)
                parents.append(c)
        else:
            rects.append((cell.x0, cell.y0, cell.x1, cell.y1))
            levels.append(cell.level)
            parents.append(c)
    return Mesh(rects, levels, mesh.domain_extent,
                mesh.dirichlet_edges, mesh.neumann_edges, parent_cells=parents)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every cell into 4 congruent children."""
    return _refine_once(mesh, range(mesh.n_cells))


def refine_adaptive(mesh: Mesh, flagged_cells) -> Mesh:
    """Split the flagged cells, then restore 1-irregularity by closure.

    ``parent_cells`` on the result maps back to the *input* mesh.
    """
    flagged = set(int(c) for c in flagged_cells)
    for c in flagged:
        if not 0 <= c < mesh.n_cells:
            raise MeshError(f"flagged cell {c} does not exist")
    if not flagged:
        return mesh
    new = _refine_once(mesh, flagged)
    lineage = new.parent_cells
    # Closure: refine any cell more than one level coarser than an
    # edge-adjacent neighbor.
    while True:
        to_refine = set()
        for f in new.facets:
            if f.cells[1] is None:
                continue
            la = new.cells[f.cells[0]].level
            lb = new.cells[f.cells[1]].level
            if la - lb > 1:
                to_refine.add(f.cells[1])
            elif lb - la > 1:
                to_refine.add(f.cells[0])
        if not to_refine:
            break
        new = _refine_once(new, to_refine)
        lineage = lineage[new.parent_cells]
    return Mesh([(c.x0, c.y0, c.x1, c.y1) for c in new.cells],
                [c.level for c in new.cells], new.domain_extent,
                new.dirichlet_edges, new.neumann_edges, parent_cells=lineage)


def skeleton_facets(mesh: Mesh):
    """Ordered facet list with cell adjacency (lexicographic by midpoint)."""
    return list(mesh.facets)
