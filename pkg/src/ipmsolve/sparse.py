"""Compressed sparse row matrices and the kernels built on them.

Every matrix in the package is a :class:`SparseMatrix`.  Instances are
immutable: the index and value arrays are flagged read-only on construction,
so a matrix can be handed to any number of simulated ranks without copying.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DimensionError, InvalidMatrixError

SymmetryTag = Literal["general", "symmetric", "spd-claimed"]
SYMMETRY_TAGS = ("general", "symmetric", "spd-claimed")

SYMMETRY_RTOL = 1e-12

_INDEX = np.int64
_INDEX_MAX = np.iinfo(_INDEX).max


def checked_offsets(counts: np.ndarray) -> np.ndarray:
    """Prefix-sum per-row counts into CSR offsets, refusing to wrap around."""
    counts = np.asarray(counts)
    if counts.size and counts.min() < 0:
        raise InvalidMatrixError("negative row count")
    total = int(counts.sum(dtype=object)) if counts.size else 0
    if total > _INDEX_MAX:
        raise OverflowError(f"nonzero count {total} exceeds the index range")
    offsets = np.zeros(counts.size + 1, dtype=_INDEX)
    np.cumsum(counts, out=offsets[1:])
    return offsets


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """A real CSR matrix.

    Column indices are strictly increasing inside each row and there are no
    duplicate entries.  The strict constructor rejects anything else; use
    :meth:`from_unsorted` to canonicalize triplet data.
    """

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetry: SymmetryTag = "general"
    _row_ids: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        nrows, ncols = int(self.nrows), int(self.ncols)
        if nrows < 0 or ncols < 0:
            raise InvalidMatrixError("negative dimension")
        offsets = np.array(self.row_offsets, dtype=_INDEX)
        cols = np.array(self.col_indices, dtype=_INDEX)
        vals = np.array(self.values, dtype=np.float64)
        if offsets.ndim != 1 or offsets.size != nrows + 1:
            raise InvalidMatrixError("row_offsets must have nrows + 1 entries")
        if offsets[0] != 0:
            raise InvalidMatrixError("row_offsets[0] must be 0")
        if np.any(np.diff(offsets) < 0):
            raise InvalidMatrixError("row_offsets must be nondecreasing")
        nnz = int(offsets[-1])
        if cols.shape != (nnz,) or vals.shape != (nnz,):
            raise InvalidMatrixError("col_indices/values length must equal row_offsets[-1]")
        if nnz:
            if cols.min() < 0 or cols.max() >= ncols:
                raise InvalidMatrixError("column index out of range")
            row_ids = np.repeat(np.arange(nrows, dtype=_INDEX), np.diff(offsets))
            same_row = row_ids[1:] == row_ids[:-1]
            if np.any(np.diff(cols)[same_row] <= 0):
                raise InvalidMatrixError(
                    "column indices must be strictly increasing within each row "
                    "(duplicates or unsorted entries)"
                )
        else:
            row_ids = np.zeros(0, dtype=_INDEX)
        if self.symmetry not in SYMMETRY_TAGS:
            raise InvalidMatrixError(f"unknown symmetry tag {self.symmetry!r}")
        object.__setattr__(self, "nrows", nrows)
        object.__setattr__(self, "ncols", ncols)
        object.__setattr__(self, "row_offsets", _frozen(offsets))
        object.__setattr__(self, "col_indices", _frozen(cols))
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "_row_ids", _frozen(row_ids))
        if self.symmetry != "general" and not self.is_numerically_symmetric():
            raise InvalidMatrixError(f"matrix tagged {self.symmetry!r} is not symmetric")

    # construction -------------------------------------------------------

    @classmethod
    def from_unsorted(
        cls,
        nrows: int,
        ncols: int,
        rows,
        cols,
        vals,
        symmetry: SymmetryTag = "general",
    ) -> "SparseMatrix":
        """Build from triplets in any order; duplicates are summed."""
        rows = np.asarray(rows, dtype=_INDEX).ravel()
        cols = np.asarray(cols, dtype=_INDEX).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        if not (rows.size == cols.size == vals.size):
            raise InvalidMatrixError("triplet arrays differ in length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= nrows:
                raise InvalidMatrixError("row index out of range")
            if cols.min() < 0 or cols.max() >= ncols:
                raise InvalidMatrixError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(new) - 1
            # bincount accumulates in input order, so duplicate sums are deterministic
            vals = np.bincount(group, weights=vals, minlength=int(group[-1]) + 1)
            rows, cols = rows[new], cols[new]
        offsets = checked_offsets(np.bincount(rows, minlength=nrows))
        return cls(nrows, ncols, offsets, cols, vals, symmetry)

    @classmethod
    def from_dense(cls, dense, symmetry: SymmetryTag = "general", keep_zeros: bool = False) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise DimensionError("from_dense expects a 2-D array")
        mask = np.ones(dense.shape, dtype=bool) if keep_zeros else dense != 0
        rows, cols = np.nonzero(mask)
        offsets = checked_offsets(mask.sum(axis=1))
        return cls(dense.shape[0], dense.shape[1], offsets, cols, dense[rows, cols], symmetry)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.diag(np.ones(n))

    @classmethod
    def diag(cls, d) -> "SparseMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = d.size
        return _retag(cls(n, n, np.arange(n + 1), np.arange(n), d), "symmetric")

    @classmethod
    def zeros(cls, nrows: int, ncols: int) -> "SparseMatrix":
        return cls(nrows, ncols, np.zeros(nrows + 1), np.zeros(0), np.zeros(0))

    # basic properties ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return self._row_ids

    @property
    def is_square(self) -> bool:
        return self.nrows == self.ncols

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self._row_ids, self.col_indices] = self.values
        return out

    def diagonal(self) -> np.ndarray:
        """Diagonal values; structurally missing entries read as 0."""
        out = np.zeros(min(self.shape))
        mask = self._row_ids == self.col_indices
        out[self._row_ids[mask]] = self.values[mask]
        return out

    def diagonal_positions(self) -> np.ndarray:
        """Storage position of each diagonal entry, -1 where absent."""
        pos = np.full(min(self.shape), -1, dtype=_INDEX)
        mask = self._row_ids == self.col_indices
        pos[self._row_ids[mask]] = np.nonzero(mask)[0]
        return pos

    def lower_nnz(self) -> int:
        """Stored entries on or below the diagonal."""
        return int(np.count_nonzero(self.col_indices <= self._row_ids))

    def pattern_hash(self) -> str:
        """Digest of the sparsity pattern only; values never enter the hash."""
        h = hashlib.sha256()
        h.update(np.array([self.nrows, self.ncols], dtype=_INDEX).tobytes())
        h.update(self.row_offsets.tobytes())
        h.update(self.col_indices.tobytes())
        return h.hexdigest()

    def same_pattern(self, other: "SparseMatrix") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
        )

    def is_numerically_symmetric(self, rtol: float = SYMMETRY_RTOL) -> bool:
        if not self.is_square:
            return False
        t = transpose(self)
        if not self.same_pattern(t):
            return False
        scale = np.abs(self.values).max() if self.nnz else 0.0
        return bool(np.all(np.abs(self.values - t.values) <= rtol * scale))

    # derived matrices ---------------------------------------------------

    def with_values(self, values, symmetry: SymmetryTag | None = None) -> "SparseMatrix":
        return SparseMatrix(
            self.nrows,
            self.ncols,
            self.row_offsets,
            self.col_indices,
            values,
            self.symmetry if symmetry is None else symmetry,
        )

    def with_symmetry(self, symmetry: SymmetryTag) -> "SparseMatrix":
        return self.with_values(self.values, symmetry)

    def scale(self, row_scale=None, col_scale=None) -> "SparseMatrix":
        """Return diag(row_scale) @ self @ diag(col_scale)."""
        vals = self.values.copy()
        if row_scale is not None:
            vals *= np.asarray(row_scale, dtype=np.float64)[self._row_ids]
        if col_scale is not None:
            vals *= np.asarray(col_scale, dtype=np.float64)[self.col_indices]
        return SparseMatrix(self.nrows, self.ncols, self.row_offsets, self.col_indices, vals)

    def permute(self, row_perm=None, col_perm=None) -> "SparseMatrix":
        """Return B with B[i, j] = self[row_perm[i], col_perm[j]].

        ``None`` keeps the corresponding order.  A symmetric permutation of a
        symmetric matrix keeps its tag.
        """
        rows, cols, vals = self._row_ids, self.col_indices, self.values
        symmetric = (
            self.symmetry != "general"
            and row_perm is not None
            and col_perm is not None
            and np.array_equal(row_perm, col_perm)
        )
        if row_perm is not None:
            row_perm = np.asarray(row_perm, dtype=_INDEX)
            _check_perm(row_perm, self.nrows)
            inv = np.empty_like(row_perm)
            inv[row_perm] = np.arange(row_perm.size)
            rows = inv[rows]
        if col_perm is not None:
            col_perm = np.asarray(col_perm, dtype=_INDEX)
            _check_perm(col_perm, self.ncols)
            inv = np.empty_like(col_perm)
            inv[col_perm] = np.arange(col_perm.size)
            cols = inv[cols]
        out = SparseMatrix.from_unsorted(self.nrows, self.ncols, rows, cols, vals)
        if symmetric:
            # a symmetric permutation moves mirrored entries together, so the
            # values stay exactly mirrored
            out = _retag(out, self.symmetry)
        return out

    def submatrix(self, rows, cols) -> "SparseMatrix":
        """Extract self[rows][:, cols] for index arrays ``rows``/``cols``."""
        rows = np.asarray(rows, dtype=_INDEX)
        cols = np.asarray(cols, dtype=_INDEX)
        colmap = np.full(self.ncols, -1, dtype=_INDEX)
        colmap[cols] = np.arange(cols.size)
        starts = self.row_offsets[rows]
        ends = self.row_offsets[rows + 1]
        counts = ends - starts
        if rows.size and counts.sum():
            idx = np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
            local_rows = np.repeat(np.arange(rows.size, dtype=_INDEX), counts)
        else:
            idx = np.zeros(0, dtype=_INDEX)
            local_rows = np.zeros(0, dtype=_INDEX)
        newcols = colmap[self.col_indices[idx]]
        keep = newcols >= 0
        return SparseMatrix.from_unsorted(
            rows.size, cols.size, local_rows[keep], newcols[keep], self.values[idx][keep]
        )

    def __matmul__(self, x):
        return spmv(self, x)

    def __repr__(self) -> str:
        return f"SparseMatrix({self.nrows}x{self.ncols}, nnz={self.nnz}, {self.symmetry})"


def _retag(A: SparseMatrix, symmetry: SymmetryTag) -> SparseMatrix:
    """Set the tag without re-validating; callers guarantee exact mirroring."""
    object.__setattr__(A, "symmetry", symmetry)
    return A


def _check_perm(perm: np.ndarray, n: int) -> None:
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidMatrixError("not a permutation of the index range")


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=_INDEX)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=_INDEX)
    return inv


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """y = A x with per-row accumulation in ascending column order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (A.ncols,):
        raise DimensionError(f"spmv: matrix has {A.ncols} columns, vector has shape {x.shape}")
    if A.nnz == 0:
        return np.zeros(A.nrows)
    # bincount adds weights sequentially in storage order
    return np.bincount(A.row_ids, weights=A.values * x[A.col_indices], minlength=A.nrows)


def transpose(A: SparseMatrix) -> SparseMatrix:
    order = np.argsort(A.col_indices, kind="stable")
    offsets = checked_offsets(np.bincount(A.col_indices, minlength=A.ncols))
    out = SparseMatrix(A.ncols, A.nrows, offsets, A.row_ids[order], A.values[order])
    return _retag(out, A.symmetry)


def spgemm_normal(B: SparseMatrix, dinv) -> SparseMatrix:
    """Form B diag(dinv) B^T as an exactly symmetric matrix.

    Entry (i, j) is accumulated over the shared columns k in ascending
    order as ``dinv[k] * (b_ik * b_jk)``; only the upper triangle is
    computed and mirrored into the lower one.
    """
    dinv = np.asarray(dinv, dtype=np.float64)
    if dinv.shape != (B.ncols,):
        raise DimensionError(f"spgemm_normal: B has {B.ncols} columns, dinv has shape {dinv.shape}")
    if not np.all(np.isfinite(dinv)) or np.any(dinv <= 0):
        raise ValueError("spgemm_normal: dinv entries must be finite and positive")
    m = B.nrows
    Bt = transpose(B)
    rows_out, cols_out, vals_out = [], [], []
    for i in range(m):
        ks, bik = B.row(i)
        if ks.size == 0:
            continue
        seg_lo = Bt.row_offsets[ks]
        seg_hi = Bt.row_offsets[ks + 1]
        idx = np.concatenate([np.arange(lo, hi) for lo, hi in zip(seg_lo, seg_hi)])
        owner = np.repeat(np.arange(ks.size), seg_hi - seg_lo)
        js = Bt.col_indices[idx]
        upper = js >= i
        js, idx, owner = js[upper], idx[upper], owner[upper]
        contrib = dinv[ks[owner]] * (bik[owner] * Bt.values[idx])
        # sort contributions by target column, stably, so each sum runs over k ascending
        order = np.argsort(js, kind="stable")
        js, contrib = js[order], contrib[order]
        uniq, start = np.unique(js, return_index=True)
        group = np.repeat(np.arange(uniq.size), np.diff(np.append(start, js.size)))
        sums = np.bincount(group, weights=contrib, minlength=uniq.size)
        rows_out.append(np.full(uniq.size, i))
        cols_out.append(uniq)
        vals_out.append(sums)
    if not rows_out:
        return _retag(SparseMatrix.zeros(m, m), "symmetric")
    r = np.concatenate(rows_out)
    c = np.concatenate(cols_out)
    v = np.concatenate(vals_out)
    off = r != c
    out = SparseMatrix.from_unsorted(
        m,
        m,
        np.concatenate([r, c[off]]),
        np.concatenate([c, r[off]]),
        np.concatenate([v, v[off]]),
    )
    return _retag(out, "symmetric")


def add(A: SparseMatrix, B: SparseMatrix, alpha: float = 1.0, beta: float = 1.0) -> SparseMatrix:
    """alpha*A + beta*B on the union pattern (no cancellation pruning)."""
    if A.shape != B.shape:
        raise DimensionError(f"add: shapes {A.shape} and {B.shape} differ")
    return SparseMatrix.from_unsorted(
        A.nrows,
        A.ncols,
        np.concatenate([A.row_ids, B.row_ids]),
        np.concatenate([A.col_indices, B.col_indices]),
        np.concatenate([alpha * A.values, beta * B.values]),
    )
