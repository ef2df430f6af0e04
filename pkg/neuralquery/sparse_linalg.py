"""
Sparse relation storage and the dense-batch kernels behind every query operator.

A relation matrix is kept in two compressed row-major layouts, one for M and
one for its transpose, so forward and inverse traversal cost the same. Dense
batches are plain ``float64`` arrays of shape ``(B, N)``; one row per
weighted multiset.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .exceptions import ShapeError, ValidationError

logger = logging.getLogger(__name__)

DenseBatch = np.ndarray


class SparseMatrix:
    """Immutable N1 x N2 nonnegative sparse matrix with a paired transposed layout."""

    __slots__ = ("_csr", "_csr_t", "_perm", "_rows", "_transpose")

    def __init__(self, csr: sp.csr_matrix, csr_t: Optional[sp.csr_matrix] = None,
                 perm: Optional[np.ndarray] = None):
        # the copy keeps the in-place canonicalization off the caller's arrays
        csr = sp.csr_matrix(csr, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr
        if csr_t is None or perm is None:
            # transposing an index-valued copy tells where each entry lands
            positions = sp.csr_matrix(
                (np.arange(csr.nnz, dtype=np.float64), csr.indices, csr.indptr), shape=csr.shape)
            positions_t = positions.T.tocsr()
            positions_t.sort_indices()
            perm = positions_t.data.astype(np.int64)
            csr_t = sp.csr_matrix((csr.data[perm], positions_t.indices, positions_t.indptr),
                                  shape=(csr.shape[1], csr.shape[0]))
        self._csr_t = csr_t
        self._perm = perm
        self._rows = None
        self._transpose = None

    @classmethod
    def from_triples(cls, rows: Sequence[int], cols: Sequence[int], weights: Sequence[float],
                     shape: Tuple[int, int]) -> "SparseMatrix":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.size and (weights.min() < 0 or not np.all(np.isfinite(weights))):
            raise ValidationError("relation weights must be finite and nonnegative")
        coo = sp.coo_matrix((weights, (np.asarray(rows, dtype=np.int64),
                                       np.asarray(cols, dtype=np.int64))), shape=shape)
        return cls(coo.tocsr())

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        rows, cols = np.nonzero(dense)
        return cls.from_triples(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def empty(cls, n_rows: int, n_cols: int) -> "SparseMatrix":
        return cls(sp.csr_matrix((n_rows, n_cols), dtype=np.float64))

    @property
    def n_rows(self) -> int:
        return self._csr.shape[0]

    @property
    def n_cols(self) -> int:
        return self._csr.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._csr.shape

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    @property
    def indptr(self) -> np.ndarray:
        return self._csr.indptr

    @property
    def indices(self) -> np.ndarray:
        return self._csr.indices

    @property
    def data(self) -> np.ndarray:
        return self._csr.data

    @property
    def csr(self) -> sp.csr_matrix:
        return self._csr

    @property
    def row_index(self) -> np.ndarray:
        """Row of every stored entry, in storage order."""
        if self._rows is None:
            self._rows = np.repeat(np.arange(self.n_rows), np.diff(self._csr.indptr))
        return self._rows

    @property
    def T(self) -> "SparseMatrix":
        if self._transpose is None:
            inverse = np.empty_like(self._perm)
            inverse[self._perm] = np.arange(self._perm.size)
            t = SparseMatrix.__new__(SparseMatrix)
            t._csr, t._csr_t, t._perm = self._csr_t, self._csr, inverse
            t._rows, t._transpose = None, self
            self._transpose = t
        return self._transpose

    def with_weights(self, values: np.ndarray) -> "SparseMatrix":
        """Same sparsity pattern, new entry weights given in storage order."""
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != self.nnz:
            raise ShapeError(f"expected {self.nnz} entry weights, got {values.size}",
                             (self.nnz,), (values.size,))
        csr = sp.csr_matrix((values, self._csr.indices, self._csr.indptr), shape=self.shape)
        csr_t = sp.csr_matrix((values[self._perm], self._csr_t.indices, self._csr_t.indptr),
                              shape=self._csr_t.shape)
        out = SparseMatrix.__new__(SparseMatrix)
        out._csr, out._csr_t, out._perm = csr, csr_t, self._perm
        out._rows, out._transpose = self._rows, None
        return out

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def memory_bytes(self) -> int:
        total = 0
        for m in (self._csr, self._csr_t):
            total += m.data.nbytes + m.indices.nbytes + m.indptr.nbytes
        return total + self._perm.nbytes

    def entries(self):
        """Iterate ``(row, col, weight)`` in row-major order."""
        for r, c, w in zip(self.row_index, self._csr.indices, self._csr.data):
            yield int(r), int(c), float(w)

    def __repr__(self) -> str:
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def check_invariants(m: SparseMatrix) -> None:
    indptr, indices, data = m.indptr, m.indices, m.data
    if indptr[0] != 0 or indptr[-1] != m.nnz or np.any(np.diff(indptr) < 0):
        raise ValidationError(f"{m!r}: row offsets are not monotone")
    for row in range(m.n_rows):
        cols = indices[indptr[row]:indptr[row + 1]]
        if cols.size > 1 and np.any(np.diff(cols) <= 0):
            raise ValidationError(f"{m!r}: row {row} has unsorted or duplicate columns")
    if data.size and data.min() < 0:
        raise ValidationError(f"{m!r}: negative weight stored")
    if (m.T.csr != m.csr.T).nnz:
        raise ValidationError(f"{m!r}: transposed layout out of sync")


def _batch(s: DenseBatch, name: str = "s") -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"{name} must be a 2-d batch, got shape {s.shape}", s.shape)
    return s


def spmm_right(s: DenseBatch, m: SparseMatrix) -> DenseBatch:
    """``s @ M`` for a dense batch ``s`` of shape (B, N1)."""
    s = _batch(s)
    if s.shape[1] != m.n_rows:
        raise ShapeError(f"batch width {s.shape[1]} does not match {m!r} rows",
                         s.shape, m.shape)
    # (s M)^T = M^T s^T, computed against the stored transposed layout
    return np.ascontiguousarray((m.T.csr @ s.T).T)


def spmm_right_transpose(s: DenseBatch, m: SparseMatrix) -> DenseBatch:
    """``s @ M.T`` without materializing a dense transpose."""
    s = _batch(s)
    if s.shape[1] != m.n_cols:
        raise ShapeError(f"batch width {s.shape[1]} does not match {m!r} columns",
                         s.shape, m.shape)
    return np.ascontiguousarray((m.csr @ s.T).T)


def weighted_sum_matvec(s: DenseBatch, r: DenseBatch,
                        mats: Sequence[SparseMatrix]) -> DenseBatch:
    """``out[b] = sum_i r[b, i] * (s[b] @ M_i)``, accumulated one member at a time."""
    if not mats:
        raise ShapeError("weighted_sum_matvec needs at least one matrix")
    s, r = _batch(s), _batch(r, "r")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeError(f"member matrices differ in shape: {shape} vs {m.shape}",
                             shape, m.shape)
    if r.shape[1] != len(mats):
        raise ShapeError(f"r has width {r.shape[1]} but there are {len(mats)} matrices",
                         r.shape, (len(mats),))
    if r.shape[0] != s.shape[0]:
        raise ShapeError(f"r batch {r.shape[0]} does not match s batch {s.shape[0]}",
                         r.shape, s.shape)
    out = np.zeros((s.shape[0], shape[1]))
    for i, m in enumerate(mats):
        column = r[:, i:i + 1]
        if not column.any():
            continue
        out += column * spmm_right(s, m)
    return out


def stack_members(mats: Sequence[SparseMatrix]) -> SparseMatrix:
    """Horizontal concatenation ``[M_1 ... M_k]`` of equally shaped matrices."""
    if not mats:
        raise ShapeError("cannot stack an empty member list")
    return SparseMatrix(sp.hstack([m.csr for m in mats], format="csr"))


def stacked_weighted_matvec(s: DenseBatch, r: DenseBatch, stacked: SparseMatrix,
                            k: int) -> Tuple[DenseBatch, np.ndarray]:
    """Follow kernel over stacked members; also returns the (B, k, N2) member products."""
    s, r = _batch(s), _batch(r, "r")
    if r.shape != (s.shape[0], k):
        raise ShapeError(f"r must have shape {(s.shape[0], k)}, got {r.shape}", r.shape)
    if stacked.n_cols % k:
        raise ShapeError(f"stacked width {stacked.n_cols} is not a multiple of {k}")
    products = spmm_right(s, stacked).reshape(s.shape[0], k, stacked.n_cols // k)
    return np.einsum("bk,bkn->bn", r, products), products


def entry_gradient(s: DenseBatch, g: DenseBatch, m: SparseMatrix,
                   inverse: bool = False) -> np.ndarray:
    """Gradient wrt the stored weights of ``m`` for ``out = s M`` (or ``s M^T``).

    Returned in ``m``'s storage order. Costs O(B * nnz).
    """
    rows, cols = m.row_index, m.indices
    if inverse:
        return np.einsum("bn,bn->n", g[:, rows], s[:, cols])
    return np.einsum("bn,bn->n", s[:, rows], g[:, cols])


def hadamard(s: DenseBatch, t: DenseBatch) -> DenseBatch:
    s, t = _batch(s), _batch(t, "t")
    if s.shape != t.shape:
        raise ShapeError(f"hadamard of {s.shape} and {t.shape}", s.shape, t.shape)
    return s * t


def add(s: DenseBatch, t: DenseBatch) -> DenseBatch:
    s, t = _batch(s), _batch(t, "t")
    if s.shape != t.shape:
        raise ShapeError(f"add of {s.shape} and {t.shape}", s.shape, t.shape)
    return s + t


def scale(s: DenseBatch, a: float) -> DenseBatch:
    return _batch(s) * float(a)


def row_sum(s: DenseBatch) -> DenseBatch:
    return _batch(s).sum(axis=1, keepdims=True)
