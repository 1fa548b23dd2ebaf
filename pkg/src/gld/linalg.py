"""Sparse and dense direct solvers.

Thin wrappers over scipy: CSR storage plus SuperLU (with its fill-reducing
column ordering) for the skeleton system, and LAPACK LU for the small dense
cell blocks.  Factorizations are immutable and safe for repeated solves.
"""

import warnings

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import SingularMatrixError

__all__ = [
    "SparseMatrix",
    "sparse_from_coo",
    "sparse_lu_factor",
    "dense_lu_factor",
    "dense_solve",
    "write_matrix_market",
]


class SparseMatrix:
    """Row-compressed sparse matrix (duplicate entries summed on build)."""

    def __init__(self, csr: scipy.sparse.csr_matrix):
        csr = csr.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr

    @property
    def shape(self):
        return self._csr.shape

    @property
    def row_offsets(self):
        return self._csr.indptr

    @property
    def column_indices(self):
        return self._csr.indices

    @property
    def values(self):
        return self._csr.data

    def matvec(self, x):
        return self._csr @ x

    def to_scipy(self):
        return self._csr


def sparse_from_coo(rows, cols, vals, shape) -> SparseMatrix:
    """Build a SparseMatrix from COO triplets, summing duplicates."""
    coo = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=shape)
    return SparseMatrix(coo.tocsr())


class _SparseLU:
    def __init__(self, lu):
        self._lu = lu

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def sparse_lu_factor(A, ordering: str = "MMD_AT_PLUS_A") -> _SparseLU:
    """LU-factorize a square sparse matrix with a fill-reducing ordering.

    The default minimum-degree ordering on A + A^T suits the structurally
    symmetric skeleton systems assembled here.
    """
    csr = A.to_scipy() if isinstance(A, SparseMatrix) else scipy.sparse.csr_matrix(A)
    n, m = csr.shape
    if n != m:
        raise SingularMatrixError(f"matrix is not square: {csr.shape}")
    try:
        lu = scipy.sparse.linalg.splu(csr.tocsc(), permc_spec=ordering)
    except RuntimeError as exc:
        row = _singular_row(str(exc))
        raise SingularMatrixError(f"sparse LU failed: {exc}", row=row) from exc
    u_diag = np.abs(lu.U.diagonal())
    if u_diag.size and u_diag.min() < 1e-300:
        row = int(np.argmin(u_diag))
        raise SingularMatrixError(
            f"numerically singular matrix (pivot {u_diag.min():.3e} at row {row})",
            row=row)
    return _SparseLU(lu)


def _singular_row(message):
    # SuperLU reports e.g. "Factor is exactly singular" or a column number.
    for tok in message.replace("(", " ").replace(")", " ").split():
        if tok.isdigit():
            return int(tok)
    return None


class _DenseLU:
    def __init__(self, lu_piv):
        self._lu_piv = lu_piv

    def solve(self, b):
        return scipy.linalg.lu_solve(self._lu_piv, np.asarray(b, dtype=float))


def dense_lu_factor(A) -> _DenseLU:
    """Partial-pivoting LU of a square dense matrix."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SingularMatrixError(f"matrix is not square: {A.shape}")
    with warnings.catch_warnings():
        # singularity is detected from the pivots below and raised as an error
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A)
    diag = np.abs(np.diag(lu))
    if diag.size and diag.min() < 1e-300:
        row = int(np.argmin(diag))
        raise SingularMatrixError(
            f"numerically singular dense matrix (row {row})", row=row)
    return _DenseLU((lu, piv))


def dense_solve(A, b):
    """Solve a dense square system."""
    return dense_lu_factor(A).solve(b)


def write_matrix_market(path, A):
    """Dump a matrix in MatrixMarket coordinate text format (debugging)."""
    mat = A.to_scipy() if isinstance(A, SparseMatrix) else scipy.sparse.coo_matrix(A)
    scipy.io.mmwrite(str(path), mat)
