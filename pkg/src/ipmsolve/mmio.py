"""Matrix Market coordinate files (real, general or symmetric).

Indices are 1-based on disk and 0-based in memory.  Symmetric files hold
the lower triangle only and are expanded to full storage on read.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import MatrixMarketError
from .sparse import SparseMatrix

_FIELDS = ("real", "integer")
_SYMMETRIES = ("general", "symmetric")


def _data_lines(lines, start: int):
    for lineno, line in enumerate(lines[start:], start=start + 1):
        stripped = line.strip()
        if stripped and not stripped.startswith("%"):
            yield lineno, stripped


def _parse_header(path, lines) -> tuple[str, str, str]:
    if not lines:
        raise MatrixMarketError(f"{path}: empty file")
    parts = lines[0].strip().split()
    if len(parts) != 5 or parts[0] != "%%MatrixMarket" or parts[1].lower() != "matrix":
        raise MatrixMarketError(
            f"{path}:1: malformed header {lines[0].strip()!r}; "
            "expected '%%MatrixMarket matrix <format> <field> <symmetry>'"
        )
    fmt, fld, sym = (p.lower() for p in parts[2:])
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"{path}:1: unknown format {fmt!r}")
    if fld not in _FIELDS:
        raise MatrixMarketError(f"{path}:1: field {fld!r} is not real")
    if sym not in _SYMMETRIES:
        raise MatrixMarketError(f"{path}:1: unsupported symmetry {sym!r}")
    return fmt, fld, sym


def read_matrix_market(path: str | os.PathLike) -> SparseMatrix:
    lines = Path(path).read_text().splitlines()
    fmt, _, sym = _parse_header(path, lines)
    if fmt != "coordinate":
        raise MatrixMarketError(f"{path}:1: expected a coordinate matrix, got {fmt!r}")
    body = _data_lines(lines, 1)
    try:
        lineno, size_line = next(body)
    except StopIteration:
        raise MatrixMarketError(f"{path}: missing size line") from None
    try:
        nrows, ncols, nnz = (int(t) for t in size_line.split())
    except ValueError:
        raise MatrixMarketError(f"{path}:{lineno}: bad size line {size_line!r}") from None
    if sym == "symmetric" and nrows != ncols:
        raise MatrixMarketError(f"{path}:{lineno}: symmetric matrix must be square")

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    k = 0
    for lineno, line in body:
        if k == nnz:
            raise MatrixMarketError(f"{path}:{lineno}: more entries than declared ({nnz})")
        toks = line.split()
        if len(toks) != 3:
            raise MatrixMarketError(f"{path}:{lineno}: expected 'row col value', got {line!r}")
        try:
            i, j, v = int(toks[0]), int(toks[1]), float(toks[2])
        except ValueError:
            raise MatrixMarketError(f"{path}:{lineno}: unparsable entry {line!r}") from None
        if not (1 <= i <= nrows and 1 <= j <= ncols):
            raise MatrixMarketError(f"{path}:{lineno}: index ({i}, {j}) out of range {nrows}x{ncols}")
        if sym == "symmetric" and i < j:
            raise MatrixMarketError(f"{path}:{lineno}: symmetric file stores an upper entry ({i}, {j})")
        rows[k], cols[k], vals[k] = i - 1, j - 1, v
        k += 1
    if k != nnz:
        raise MatrixMarketError(f"{path}: declared {nnz} entries, found {k}")

    if sym == "symmetric":
        off = rows != cols
        rows, cols, vals = (
            np.concatenate([rows, cols[off]]),
            np.concatenate([cols, rows[off]]),
            np.concatenate([vals, vals[off]]),
        )
    return SparseMatrix.from_unsorted(nrows, ncols, rows, cols, vals, symmetry=sym)


def write_matrix_market(A: SparseMatrix, path: str | os.PathLike, comment: str | None = None) -> None:
    symmetric = A.symmetry != "general"
    if symmetric:
        keep = A.col_indices <= A.row_ids
        rows, cols, vals = A.row_ids[keep], A.col_indices[keep], A.values[keep]
    else:
        rows, cols, vals = A.row_ids, A.col_indices, A.values
    out = [f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}"]
    if comment:
        out.extend(f"% {c}" for c in comment.splitlines())
    out.append(f"{A.nrows} {A.ncols} {rows.size}")
    # %.17g round-trips every binary64 value exactly
    out.extend(f"{i + 1} {j + 1} {v:.17g}" for i, j, v in zip(rows.tolist(), cols.tolist(), vals.tolist()))
    Path(path).write_text("\n".join(out) + "\n")


def read_vector(path: str | os.PathLike) -> np.ndarray:
    """Read a dense vector: Matrix Market ``array`` file or one value per line."""
    lines = Path(path).read_text().splitlines()
    if lines and lines[0].startswith("%%MatrixMarket"):
        fmt, _, _ = _parse_header(path, lines)
        if fmt != "array":
            raise MatrixMarketError(f"{path}:1: expected an array file for a vector")
        body = _data_lines(lines, 1)
        lineno, size_line = next(body)
        try:
            n, ncol = (int(t) for t in size_line.split())
        except ValueError:
            raise MatrixMarketError(f"{path}:{lineno}: bad size line {size_line!r}") from None
        if ncol != 1:
            raise MatrixMarketError(f"{path}:{lineno}: vector file must have one column")
        vals = [float(line) for _, line in body]
        if len(vals) != n:
            raise MatrixMarketError(f"{path}: declared {n} values, found {len(vals)}")
        return np.array(vals)
    try:
        return np.array([float(line) for _, line in _data_lines(lines, 0)])
    except ValueError as exc:
        raise MatrixMarketError(f"{path}: {exc}") from None
