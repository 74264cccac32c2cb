"""Minimal sparse linear algebra: CSR storage, SPD solves, quadratic forms.

Wraps scipy.sparse for storage/factorization behind a small frozen API;
adds a Jacobi-preconditioned CG fallback and MatrixMarket debug export.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee


class NotSpdError(ValueError):
    """Raised when a factorization meets a nonpositive pivot."""


class CgConvergenceError(RuntimeError):
    """Raised when the CG fallback exhausts its iteration budget."""


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed-sparse-row matrix.

    Invariants: row_offsets is nondecreasing with length nrows+1,
    col_indices lie in [0, ncols) and are strictly increasing within
    each row.
    """

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        ro = np.asarray(self.row_offsets)
        ci = np.asarray(self.col_indices)
        if len(ro) != self.nrows + 1:
            raise ValueError("row_offsets must have length nrows+1")
        if np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing")
        if ro[-1] != len(ci) or len(ci) != len(np.asarray(self.values)):
            raise ValueError("offset/index/value lengths inconsistent")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.ncols):
            raise ValueError("column index out of range")
        for r in range(self.nrows):
            cols = ci[ro[r]:ro[r + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError(f"columns not strictly increasing in row {r}")

    @classmethod
    def from_scipy(cls, A) -> "CsrMatrix":
        A = sp.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        A.eliminate_zeros()
        return cls(A.shape[0], A.shape[1], A.indptr.copy(),
                   A.indices.copy(), A.data.astype(float).copy())

    @classmethod
    def from_dense(cls, A) -> "CsrMatrix":
        return cls.from_scipy(sp.csr_matrix(np.asarray(A, dtype=float)))

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.nrows, self.ncols))

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    def nnz(self) -> int:
        return len(self.values)


@dataclass
class DofVector:
    """Block-partitioned coefficient vector.

    block_map names contiguous index ranges (start, stop); blocks are
    disjoint, nonempty, and cover the whole array.
    """

    data: np.ndarray
    block_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).ravel()
        if not self.block_map:
            self.block_map = {"x": (0, len(self.data))}
        covered = 0
        seen = np.zeros(len(self.data), dtype=bool)
        for name, (a, b) in self.block_map.items():
            if b <= a:
                raise ValueError(f"block {name!r} is empty")
            if a < 0 or b > len(self.data):
                raise ValueError(f"block {name!r} out of range")
            if seen[a:b].any():
                raise ValueError(f"block {name!r} overlaps another block")
            seen[a:b] = True
            covered += b - a
        if covered != len(self.data):
            raise ValueError("blocks do not cover the array")

    def block(self, name: str) -> np.ndarray:
        a, b = self.block_map[name]
        return self.data[a:b]

    def copy(self) -> "DofVector":
        return DofVector(self.data.copy(), dict(self.block_map))

    def __len__(self):
        return len(self.data)


def _as_array(x) -> np.ndarray:
    if isinstance(x, DofVector):
        return x.data
    return np.asarray(x, dtype=float).ravel()


def _like(x, data: np.ndarray):
    if isinstance(x, DofVector):
        return DofVector(data, dict(x.block_map))
    return data


def spmv(A: CsrMatrix, x):
    """Matrix-vector product A @ x, preserving the input's vector type."""
    xv = _as_array(x)
    if A.ncols != len(xv):
        raise ValueError(f"dimension mismatch: {A.ncols} cols vs {len(xv)}")
    return _like(x, A.to_scipy() @ xv)


def quad_form(A: CsrMatrix, x) -> float:
    """Evaluate x^T A x (A symmetric square)."""
    xv = _as_array(x)
    if A.nrows != A.ncols:
        raise ValueError("quad_form needs a square matrix")
    if A.ncols != len(xv):
        raise ValueError(f"dimension mismatch: {A.ncols} vs {len(xv)}")
    return float(xv @ (A.to_scipy() @ xv))


def symmetry_defect(A: CsrMatrix) -> float:
    """Largest entry of |A - A^T| (0 for exactly symmetric input)."""
    S = A.to_scipy()
    d = S - S.T
    return float(np.abs(d.data).max()) if d.nnz else 0.0


def assert_symmetric(A: CsrMatrix, rel: float = 1e-12) -> None:
    amax = float(np.abs(A.values).max()) if A.nnz() else 0.0
    if symmetry_defect(A) > rel * max(amax, 1.0):
        raise ValueError("matrix is not symmetric within tolerance")


class SpdFactorization:
    """Direct factorization of an SPD matrix, reusable across solves.

    LU without partial pivoting on an SPD matrix is an LDL^T in
    disguise; nonpositive U-pivots therefore flag a non-SPD input.
    Optional reverse Cuthill-McKee preordering reduces fill.
    """

    def __init__(self, A: CsrMatrix, use_rcm: bool = False):
        S = A.to_scipy().tocsc()
        if S.shape[0] != S.shape[1]:
            raise ValueError("factorization needs a square matrix")
        self._perm = None
        if use_rcm:
            perm = reverse_cuthill_mckee(S.tocsr(), symmetric_mode=True)
            self._perm = np.asarray(perm)
            S = S[self._perm[:, None], self._perm]
        self._n = S.shape[0]
        self._lu = spla.splu(S.tocsc(), permc_spec="NATURAL",
                             diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})
        pivots = self._lu.U.diagonal()
        if np.any(pivots <= 0.0):
            raise NotSpdError("nonpositive pivot: matrix is not SPD")

    def solve(self, b) -> np.ndarray:
        bv = _as_array(b)
        if len(bv) != self._n:
            raise ValueError("right-hand side length mismatch")
        if self._perm is not None:
            x = np.empty_like(bv)
            x[self._perm] = self._lu.solve(bv[self._perm])
            return x
        return self._lu.solve(bv)


def cg_jacobi(A: CsrMatrix, b, tol: float = 1e-10, max_iter: int | None = None):
    """Jacobi-preconditioned conjugate gradients for SPD systems."""
    S = A.to_scipy()
    bv = _as_array(b)
    if S.shape[1] != len(bv):
        raise ValueError("dimension mismatch")
    n = len(bv)
    if max_iter is None:
        max_iter = 4 * n + 100
    dinv = S.diagonal()
    if np.any(dinv <= 0):
        raise NotSpdError("nonpositive diagonal entry in CG preconditioner")
    dinv = 1.0 / dinv
    x = np.zeros(n)
    r = bv.copy()
    bnorm = np.linalg.norm(bv)
    if bnorm == 0.0:
        return _like(b, x)
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(max_iter):
        Ap = S @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            return _like(b, x)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CgConvergenceError(f"CG did not reach tol={tol} in {max_iter} iterations")


def solve_spd(A: CsrMatrix, b, tol: float = 1e-10, use_rcm: bool = False):
    """Solve A x = b for SPD A: direct factorization, CG as fallback.

    The direct path is exact up to roundoff; the relative residual is
    checked against tol and CG refines if factorization is unavailable.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    bv = _as_array(b)
    if A.nrows != A.ncols or A.ncols != len(bv):
        raise ValueError("dimension mismatch")
    try:
        x = SpdFactorization(A, use_rcm=use_rcm).solve(bv)
    except NotSpdError:
        raise
    except RuntimeError:
        return cg_jacobi(A, b, tol=tol)
    bnorm = np.linalg.norm(bv)
    if bnorm > 0:
        res = np.linalg.norm(A.to_scipy() @ x - bv) / bnorm
        if not np.isfinite(res) or res > max(tol, 1e-12) * 10:
            x = _as_array(cg_jacobi(A, b, tol=tol))
    return _like(b, x)


def write_matrix_market(A: CsrMatrix, path: str) -> None:
    """Write A as MatrixMarket coordinate data (symmetric when it is)."""
    S = A.to_scipy().tocoo()
    symmetric = A.nrows == A.ncols and symmetry_defect(A) == 0.0
    with open(path, "w", encoding="ascii") as fh:
        kind = "symmetric" if symmetric else "general"
        fh.write(f"%%MatrixMarket matrix coordinate real {kind}\n")
        if symmetric:
            keep = S.row >= S.col
            rows, cols, vals = S.row[keep], S.col[keep], S.data[keep]
        else:
            rows, cols, vals = S.row, S.col, S.data
        fh.write(f"{A.nrows} {A.ncols} {len(vals)}\n")
        for r, c, v in zip(rows, cols, vals):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")
