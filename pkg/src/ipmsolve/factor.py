"""Incomplete and complete sparse factorizations and their triangular solves.

Kinds
-----
``ilu0``               zero-fill incomplete LU, unit lower L
``ic0``                zero-fill incomplete Cholesky, L non-unit, U = L^T
``lu_complete``        LU with fill, static ordering, unit lower L
``cholesky_complete``  Cholesky with fill, U = L^T

None of the kernels pivot.  A pivot smaller than ``PIVOT_RTOL`` times the
largest magnitude in its input row raises :class:`PivotError`; permutation,
scaling and diagonal correction happen upstream (see :mod:`ipmsolve.precond`).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DimensionError, InvalidMatrixError, PatternMismatchError, PivotError
from .krylov import Preconditioner
from .sparse import SparseMatrix, spmv, transpose

FactorKind = Literal["ilu0", "ic0", "lu_complete", "cholesky_complete"]
FACTOR_KINDS = ("ilu0", "ic0", "lu_complete", "cholesky_complete")

PIVOT_RTOL = 1e-14


def _row_max(A: SparseMatrix) -> np.ndarray:
    out = np.zeros(A.nrows)
    if A.nnz:
        np.maximum.at(out, A.row_ids, np.abs(A.values))
    return out


def _pivot_ok(piv: float, rowmax: float) -> bool:
    return piv != 0.0 and abs(piv) >= PIVOT_RTOL * rowmax


def _require_square(A: SparseMatrix, what: str) -> None:
    if not A.is_square:
        raise DimensionError(f"{what}: matrix must be square, got {A.shape}")


def _require_symmetric(A: SparseMatrix, what: str) -> None:
    if A.symmetry == "general":
        raise InvalidMatrixError(f"{what}: requires a matrix tagged symmetric")


# -- triangular solves --------------------------------------------------------


class TriangularSolver:
    """Level-scheduled solve with a sparse triangular matrix.

    Rows are grouped into levels so that each row depends only on rows of
    earlier levels; a level is then solved with one vectorized gather and a
    ``bincount`` that accumulates each row's terms in ascending column order.
    """

    def __init__(self, T: SparseMatrix, lower: bool, unit_diagonal: bool):
        _require_square(T, "triangular solve")
        n = T.nrows
        rows, cols, vals = T.row_ids, T.col_indices, T.values
        if lower and np.any(cols > rows):
            raise InvalidMatrixError("matrix is not lower triangular")
        if not lower and np.any(cols < rows):
            raise InvalidMatrixError("matrix is not upper triangular")
        off = cols != rows
        if unit_diagonal:
            diag = np.ones(n)
        else:
            diag = T.diagonal()
            if np.any(diag == 0.0):
                bad = int(np.flatnonzero(diag == 0.0)[0])
                raise PivotError(f"zero diagonal in triangular factor at row {bad}", bad)
        orows, ocols, ovals = rows[off], cols[off], vals[off]

        level = np.zeros(n, dtype=np.int64)
        order = range(n) if lower else range(n - 1, -1, -1)
        offsets = T.row_offsets
        for i in order:
            lo, hi = offsets[i], offsets[i + 1]
            deps = cols[lo:hi]
            deps = deps[deps != i]
            if deps.size:
                level[i] = level[deps].max() + 1

        self.n = n
        self.diag = diag
        self.levels = []
        by_level = np.argsort(level, kind="stable")
        bounds = np.searchsorted(level[by_level], np.arange(level.max() + 2 if n else 1))
        entry_level = level[orows]
        for lev in range(len(bounds) - 1):
            lrows = by_level[bounds[lev]:bounds[lev + 1]]
            local = np.full(n, -1, dtype=np.int64)
            local[lrows] = np.arange(lrows.size)
            sel = np.flatnonzero(entry_level == lev)
            self.levels.append((lrows, local[orows[sel]], ocols[sel], ovals[sel], diag[lrows]))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.n,):
            raise DimensionError(f"triangular solve: rhs shape {b.shape}, expected ({self.n},)")
        x = np.zeros(self.n)
        for lrows, erow, ecol, evals, d in self.levels:
            acc = np.bincount(erow, weights=evals * x[ecol], minlength=lrows.size)
            x[lrows] = (b[lrows] - acc) / d
        return x


# -- factor bundle ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactorBundle:
    """A realized preconditioner ``P_r A P_c ~= diag(rs)^{-1} L U diag(cs)^{-1}``.

    The factors belong to the transformed matrix
    ``diag(row_scale) @ A[row_perm][:, col_perm] @ diag(col_scale)``; every
    transform is optional (``None`` means identity).  :meth:`solve` takes and
    returns vectors in the original ordering.
    """

    L: SparseMatrix
    U: SparseMatrix
    kind: FactorKind
    row_perm: np.ndarray | None = None
    col_perm: np.ndarray | None = None
    row_scale: np.ndarray | None = None
    col_scale: np.ndarray | None = None
    notes: dict = field(default_factory=dict)
    _lower: TriangularSolver = field(init=False, repr=False)
    _upper: TriangularSolver = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        object.__setattr__(self, "_lower", TriangularSolver(self.L, True, self.unit_lower))
        object.__setattr__(self, "_upper", TriangularSolver(self.U, False, False))

    @property
    def n(self) -> int:
        return self.L.nrows

    @property
    def unit_lower(self) -> bool:
        return self.kind in ("ilu0", "lu_complete")

    def with_transform(self, row_perm=None, col_perm=None, row_scale=None, col_scale=None, **notes) -> "FactorBundle":
        return FactorBundle(
            self.L, self.U, self.kind, row_perm, col_perm, row_scale, col_scale, {**self.notes, **notes}
        )

    def forward(self, b) -> np.ndarray:
        """Scale/permute ``b`` and solve with L."""
        y = np.asarray(b, dtype=np.float64)
        if self.row_perm is not None:
            y = y[self.row_perm]
        if self.row_scale is not None:
            y = y * self.row_scale
        return self._lower.solve(y)

    def backward(self, z) -> np.ndarray:
        """Solve with U and undo the column scaling/permutation."""
        w = self._upper.solve(z)
        if self.col_scale is not None:
            w = w * self.col_scale
        if self.col_perm is not None:
            x = np.empty_like(w)
            x[self.col_perm] = w
            return x
        return w

    def solve(self, b) -> np.ndarray:
        return self.backward(self.forward(b))

    def as_preconditioner(self) -> Preconditioner:
        return Preconditioner(self.n, self.solve)

    def product(self) -> np.ndarray:
        """Dense L @ U, for tests and diagnostics."""
        return self.L.to_dense() @ self.U.to_dense()


def sptrsv(F: FactorBundle, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (F.n,):
        raise DimensionError(f"sptrsv: rhs shape {b.shape}, factor dimension {F.n}")
    return F.solve(b)


def _split_lu(A: SparseMatrix, vals: np.ndarray, unit: bool) -> tuple[SparseMatrix, SparseMatrix]:
    """Cut an in-place LU storage (pattern of ``A``) into L and U matrices."""
    n = A.nrows
    rows, cols = A.row_ids, A.col_indices
    low = cols < rows
    up = cols >= rows
    if unit:
        lr = np.concatenate([rows[low], np.arange(n)])
        lc = np.concatenate([cols[low], np.arange(n)])
        lv = np.concatenate([vals[low], np.ones(n)])
    else:
        lr, lc, lv = rows[low], cols[low], vals[low]
    L = SparseMatrix.from_unsorted(n, n, lr, lc, lv)
    U = SparseMatrix.from_unsorted(n, n, rows[up], cols[up], vals[up])
    return L, U


# -- zero-fill factorizations -------------------------------------------------


def ilu0(A: SparseMatrix) -> FactorBundle:
    """ILU(0): (LU)_ij = a_ij on the pattern of A, no fill outside it."""
    _require_square(A, "ilu0")
    n = A.nrows
    diagpos = A.diagonal_positions()
    missing = np.flatnonzero(diagpos < 0)
    if missing.size:
        r = int(missing[0])
        raise PivotError(f"ilu0: structurally missing diagonal at row {r}", r)
    offsets, cols = A.row_offsets, A.col_indices
    vals = A.values.copy()
    rowmax = _row_max(A)
    iw = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        lo, hi = offsets[i], offsets[i + 1]
        rc = cols[lo:hi]
        iw[rc] = np.arange(lo, hi)
        for p in range(lo, diagpos[i]):
            k = cols[p]
            lik = vals[p] / vals[diagpos[k]]
            vals[p] = lik
            ulo, uhi = diagpos[k] + 1, offsets[k + 1]
            if ulo < uhi:
                tgt = iw[cols[ulo:uhi]]
                hit = tgt >= 0
                vals[tgt[hit]] -= lik * vals[ulo:uhi][hit]
        iw[rc] = -1
        if not _pivot_ok(vals[diagpos[i]], rowmax[i]):
            raise PivotError(f"ilu0: pivot {vals[diagpos[i]]:.3e} too small at row {i}", i)
    L, U = _split_lu(A, vals, unit=True)
    return FactorBundle(L, U, "ilu0")


def ic0(A: SparseMatrix) -> FactorBundle:
    """IC(0) on the lower triangle of a symmetric matrix."""
    _require_square(A, "ic0")
    _require_symmetric(A, "ic0")
    n = A.nrows
    keep = A.col_indices <= A.row_ids
    low = SparseMatrix.from_unsorted(n, n, A.row_ids[keep], A.col_indices[keep], A.values[keep])
    diagpos = low.diagonal_positions()
    missing = np.flatnonzero(diagpos < 0)
    if missing.size:
        r = int(missing[0])
        raise PivotError(f"ic0: structurally missing diagonal at row {r}", r)
    offsets, cols = low.row_offsets, low.col_indices
    vals = low.values.copy()
    rowmax = _row_max(A)
    iw = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        lo, d = offsets[i], diagpos[i]
        rc = cols[lo:d]
        iw[rc] = np.arange(lo, d)
        for p in range(lo, d):
            j = cols[p]
            jlo, jd = offsets[j], diagpos[j]
            tgt = iw[cols[jlo:jd]]
            hit = tgt >= 0
            s = vals[p] - float(vals[tgt[hit]] @ vals[jlo:jd][hit])
            vals[p] = s / vals[jd]
        iw[rc] = -1
        piv = vals[d] - float(vals[lo:d] @ vals[lo:d])
        if not (piv > 0.0 and np.sqrt(piv) >= PIVOT_RTOL * rowmax[i]):
            raise PivotError(f"ic0: nonpositive or tiny pivot {piv:.3e} at row {i}", i)
        vals[d] = np.sqrt(piv)
    L = low.with_values(vals)
    return FactorBundle(L, transpose(L), "ic0")


# -- complete factorizations --------------------------------------------------


@dataclass(frozen=True, eq=False)
class LuSymbolic:
    """Fill pattern of a no-pivoting LU, computed once and reusable.

    ``input_hash`` identifies the pattern the analysis ran on; numeric
    factorization accepts any matrix whose pattern is contained in it.
    """

    n: int
    input_hash: str
    lower: SparseMatrix  # strict lower pattern, values unused
    upper: SparseMatrix  # upper pattern including the diagonal, values unused

    @property
    def fill_nnz(self) -> int:
        return self.lower.nnz + self.upper.nnz


def lu_symbolic(A: SparseMatrix) -> LuSymbolic:
    """Row-by-row symbolic elimination.

    The pattern of row i of L+U is the closure of A's row pattern under
    "column k < i is present, so every column of U's row k is present".
    The diagonal is always included.
    """
    _require_square(A, "lu_symbolic")
    n = A.nrows
    upper_rows: list[np.ndarray] = []
    lrows, lcols, urows, ucols = [], [], [], []
    for i in range(n):
        acols, _ = A.row(i)
        mark = set(acols.tolist())
        mark.add(i)
        heap = [k for k in mark if k < i]
        heapq.heapify(heap)
        while heap:
            k = heapq.heappop(heap)
            for j in upper_rows[k]:
                if j not in mark:
                    mark.add(j)
                    if j < i:
                        heapq.heappush(heap, j)
        row = np.array(sorted(mark), dtype=np.int64)
        lo = row[row < i]
        hi = row[row >= i]
        upper_rows.append(hi[1:].tolist())
        lrows.append(np.full(lo.size, i))
        lcols.append(lo)
        urows.append(np.full(hi.size, i))
        ucols.append(hi)
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    lr, lc, ur, uc = cat(lrows), cat(lcols), cat(urows), cat(ucols)
    lower = SparseMatrix.from_unsorted(n, n, lr, lc, np.zeros(lr.size))
    upper = SparseMatrix.from_unsorted(n, n, ur, uc, np.zeros(ur.size))
    return LuSymbolic(n, A.pattern_hash(), lower, upper)


def _check_contained(A: SparseMatrix, sym: LuSymbolic) -> None:
    if A.shape != (sym.n, sym.n):
        raise DimensionError(f"matrix shape {A.shape} does not match symbolic size {sym.n}")
    if A.pattern_hash() == sym.input_hash:
        return
    marker = np.full(sym.n, -1, dtype=np.int64)
    for i in range(sym.n):
        marker[sym.lower.row(i)[0]] = i
        marker[sym.upper.row(i)[0]] = i
        acols = A.row(i)[0]
        if np.any(marker[acols] != i):
            raise PatternMismatchError(f"row {i} has entries outside the symbolic fill pattern")


def lu_numeric(A: SparseMatrix, sym: LuSymbolic) -> FactorBundle:
    """Up-looking LU on the fill pattern from :func:`lu_symbolic`."""
    _check_contained(A, sym)
    n = sym.n
    rowmax = _row_max(A)
    w = np.zeros(n)
    lvals = np.zeros(sym.lower.nnz)
    uvals = np.zeros(sym.upper.nnz)
    loff, lcol = sym.lower.row_offsets, sym.lower.col_indices
    uoff, ucol = sym.upper.row_offsets, sym.upper.col_indices
    udiag = np.zeros(n)
    for i in range(n):
        acols, avals = A.row(i)
        w[acols] = avals
        llo, lhi = loff[i], loff[i + 1]
        for k in lcol[llo:lhi]:
            lik = w[k] / udiag[k]
            w[k] = lik
            # U row k without its diagonal
            ulo, uhi = uoff[k] + 1, uoff[k + 1]
            if ulo < uhi:
                w[ucol[ulo:uhi]] -= lik * uvals[ulo:uhi]
        ulo, uhi = uoff[i], uoff[i + 1]
        lvals[llo:lhi] = w[lcol[llo:lhi]]
        uvals[ulo:uhi] = w[ucol[ulo:uhi]]
        piv = w[i]
        w[lcol[llo:lhi]] = 0.0
        w[ucol[ulo:uhi]] = 0.0
        if not _pivot_ok(piv, rowmax[i]):
            raise PivotError(f"lu: pivot {piv:.3e} too small at row {i}", i)
        udiag[i] = piv
    rows = sym.lower.row_ids
    L = SparseMatrix.from_unsorted(
        n, n, np.concatenate([rows, np.arange(n)]), np.concatenate([lcol, np.arange(n)]),
        np.concatenate([lvals, np.ones(n)]),
    )
    U = sym.upper.with_values(uvals)
    return FactorBundle(L, U, "lu_complete", notes={"fill_nnz": sym.fill_nnz})


def lu_complete(A: SparseMatrix) -> FactorBundle:
    return lu_numeric(A, lu_symbolic(A))


def cholesky_numeric(A: SparseMatrix, sym: LuSymbolic) -> FactorBundle:
    """Up-looking Cholesky; only the lower half of the fill pattern is used."""
    _require_symmetric(A, "cholesky")
    _check_contained(A, sym)
    n = sym.n
    rowmax = _row_max(A)
    lower = sym.lower
    loff, lcol = lower.row_offsets, lower.col_indices
    lvals = np.zeros(lower.nnz)
    # column-wise view of L, filled as rows complete (rows ascend within a column)
    lt = transpose(lower)
    coff, crow = lt.row_offsets, lt.col_indices
    pos_in_col = np.empty(lower.nnz, dtype=np.int64)
    pos_in_col[np.argsort(lower.col_indices, kind="stable")] = np.arange(lower.nnz)
    cvals = np.zeros(lower.nnz)
    filled = np.zeros(n, dtype=np.int64)
    ldiag = np.zeros(n)
    w = np.zeros(n)
    for i in range(n):
        acols, avals = A.row(i)
        keep = acols <= i
        w[acols[keep]] = avals[keep]
        llo, lhi = loff[i], loff[i + 1]
        ks = lcol[llo:lhi]
        for k in ks:
            lik = w[k] / ldiag[k]
            w[k] = lik
            clo = coff[k]
            chi = clo + filled[k]
            if clo < chi:
                w[crow[clo:chi]] -= lik * cvals[clo:chi]
        li = w[ks].copy()
        piv = w[i] - float(li @ li)
        w[ks] = 0.0
        w[i] = 0.0
        if not (piv > 0.0 and np.sqrt(piv) >= PIVOT_RTOL * rowmax[i]):
            raise PivotError(f"cholesky: nonpositive or tiny pivot {piv:.3e} at row {i}", i)
        ldiag[i] = np.sqrt(piv)
        lvals[llo:lhi] = li
        cvals[pos_in_col[llo:lhi]] = li
        filled[ks] += 1
    rows = lower.row_ids
    L = SparseMatrix.from_unsorted(
        n, n, np.concatenate([rows, np.arange(n)]), np.concatenate([lcol, np.arange(n)]),
        np.concatenate([lvals, ldiag]),
    )
    return FactorBundle(L, transpose(L), "cholesky_complete", notes={"fill_nnz": 2 * lower.nnz + n})


def cholesky_complete(A: SparseMatrix) -> FactorBundle:
    _require_square(A, "cholesky_complete")
    _require_symmetric(A, "cholesky_complete")
    return cholesky_numeric(A, lu_symbolic(A))


def factorize(A: SparseMatrix, kind: FactorKind) -> FactorBundle:
    if kind == "ilu0":
        return ilu0(A)
    if kind == "ic0":
        return ic0(A)
    if kind == "lu_complete":
        return lu_complete(A)
    if kind == "cholesky_complete":
        return cholesky_complete(A)
    raise ValueError(f"unknown factor kind {kind!r}")


def symbolic(A: SparseMatrix, kind: FactorKind):
    """Symbolic phase; zero-fill kinds have none beyond A's own pattern."""
    if kind in ("lu_complete", "cholesky_complete"):
        return lu_symbolic(A)
    return A.pattern_hash()


def numeric(A: SparseMatrix, sym, kind: FactorKind) -> FactorBundle:
    if kind == "lu_complete":
        return lu_numeric(A, sym)
    if kind == "cholesky_complete":
        return cholesky_numeric(A, sym)
    if A.pattern_hash() != sym:
        raise PatternMismatchError(f"{kind}: pattern differs from the analysed one")
    return factorize(A, kind)


# -- Schur complement pieces --------------------------------------------------


@dataclass(frozen=True, eq=False)
class SchurFactor:
    """One interior block factored, plus its contribution to the interface.

    ``schur_contrib = border_row @ diag_block^{-1} @ border_col`` is stored
    with every position present, since it is generally dense.
    """

    interior: FactorBundle
    border_row: SparseMatrix  # interface rows x block columns
    border_col: SparseMatrix  # block rows x interface columns
    schur_contrib: SparseMatrix


def schur_partial_factor(
    diag_block: SparseMatrix,
    border_col: SparseMatrix,
    border_row: SparseMatrix,
    kind: FactorKind = "lu_complete",
    interior: FactorBundle | None = None,
) -> SchurFactor:
    """Factor the interior block and form its Schur contribution.

    One interior solve per interface column, columns in ascending order.
    A prefactored ``interior`` bundle may be supplied.
    """
    nb = diag_block.nrows
    ns = border_row.nrows
    if border_col.shape != (nb, ns) or border_row.shape != (ns, nb):
        raise DimensionError(
            f"border shapes {border_col.shape}/{border_row.shape} do not fit block {nb} and interface {ns}"
        )
    if interior is None:
        interior = factorize(diag_block, kind)
    contrib = np.zeros((ns, ns))
    if nb and ns and border_col.nnz and border_row.nnz:
        cols_dense = border_col.to_dense()
        for c in range(ns):
            rhs = cols_dense[:, c]
            if np.any(rhs):
                contrib[:, c] = spmv(border_row, interior.solve(rhs))
    return SchurFactor(
        interior, border_row, border_col, SparseMatrix.from_dense(contrib, keep_zeros=True)
    )
