"""Polynomial bases on the reference square/segment and Gauss quadrature.

Cell unknowns use tensor-product Lagrange polynomials on Gauss-Lobatto
nodes of the reference square [-1,1]^2; trace unknowns use the 1D analogue
on the reference segment [-1,1].  All basis/quadrature tabulations are
immutable after construction and shared read-only by the assembler.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadratureRule",
    "CellBasis",
    "FacetBasis",
    "gauss_legendre",
    "tensor_quadrature",
    "gauss_lobatto_nodes",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature points in [-1,1]^d with positive weights."""

    points: np.ndarray  # (n,) in 1D or (n, 2) in 2D
    weights: np.ndarray  # (n,)

    @property
    def dim(self) -> int:
        return 1 if self.points.ndim == 1 else self.points.shape[1]


def gauss_legendre(n: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``n`` points, exact up to degree 2n-1."""
    if n < 1:
        raise ValueError(f"point count must be >= 1, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(points=x, weights=w)


def tensor_quadrature(rule1d: QuadratureRule) -> QuadratureRule:
    """Tensor product of a 1D rule with itself on [-1,1]^2."""
    x, w = rule1d.points, rule1d.weights
    xx, yy = np.meshgrid(x, x, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    weights = np.outer(w, w).ravel()
    return QuadratureRule(points=points, weights=weights)


def gauss_lobatto_nodes(n: int) -> np.ndarray:
    """``n`` Gauss-Lobatto nodes in [-1,1] (endpoints included for n >= 2)."""
    if n < 1:
        raise ValueError(f"node count must be >= 1, got {n}")
    if n == 1:
        return np.array([0.0])
    if n == 2:
        return np.array([-1.0, 1.0])
    # Interior nodes are the roots of P'_{n-1}.
    legendre = np.polynomial.legendre.Legendre.basis(n - 1)
    interior = legendre.deriv().roots()
    return np.concatenate([[-1.0], np.sort(interior.real), [1.0]])


def _lagrange_1d(nodes: np.ndarray, x: np.ndarray):
    """Values and derivatives of the Lagrange basis on ``nodes`` at ``x``.

    Returns arrays of shape (len(nodes), len(x)).
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(nodes)
    values = np.ones((n, x.size))
    derivs = np.zeros((n, x.size))
    for j in range(n):
        for i in range(n):
            if i == j:
                continue
            denom = nodes[j] - nodes[i]
            # d/dx of the running product, accumulated term by term
            derivs[j] = (derivs[j] * (x - nodes[i]) + values[j]) / denom
            values[j] = values[j] * (x - nodes[i]) / denom
    return values, derivs


@dataclass(frozen=True)
class FacetBasis:
    """Nodal Lagrange basis of degree k on the reference segment [-1,1]."""

    degree: int
    nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        object.__setattr__(self, "nodes", gauss_lobatto_nodes(self.degree + 1))

    @property
    def dimension(self) -> int:
        return self.degree + 1

    def eval(self, points: np.ndarray):
        """Basis values and derivatives at 1D reference points.

        Returns (values, derivs), each of shape (k+1, npoints).
        """
        return _lagrange_1d(self.nodes, points)


@dataclass(frozen=True)
class CellBasis:
    """Tensor-product nodal Lagrange basis of degree k on [-1,1]^2.

    The (k+1)^2 basis functions are ordered with the x-index fastest:
    phi[a] = l_i(x) * l_j(y) with a = j*(k+1) + i.
    """

    degree: int
    nodes1d: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        object.__setattr__(self, "nodes1d", gauss_lobatto_nodes(self.degree + 1))

    @property
    def dimension(self) -> int:
        return (self.degree + 1) ** 2

    def eval(self, points: np.ndarray):
        """Basis values and reference-space gradients at 2D points.

        Parameters
        ----------
        points : (n, 2) array in [-1,1]^2.

        Returns
        -------
        values : (dim, n)
        gradients : (dim, n, 2)
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        vx, dx = _lagrange_1d(self.nodes1d, points[:, 0])
        vy, dy = _lagrange_1d(self.nodes1d, points[:, 1])
        n1 = self.degree + 1
        npts = points.shape[0]
        values = np.empty((n1 * n1, npts))
        grads = np.empty((n1 * n1, npts, 2))
        for j in range(n1):
            for i in range(n1):
                a = j * n1 + i
                values[a] = vx[i] * vy[j]
                grads[a, :, 0] = dx[i] * vy[j]
                grads[a, :, 1] = vx[i] * dy[j]
        return values, grads
