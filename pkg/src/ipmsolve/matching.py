"""Maximum-product transversal with dual-derived scalings.

For column maxima ``a_j = max_i |a_ij|`` the cost ``c_ij = log a_j - log|a_ij|``
is nonnegative on the pattern.  A minimum-cost perfect matching under ``c``
maximizes ``prod |a_{sigma(j), j}|``.  The matching is grown one column at a
time by Dijkstra shortest augmenting paths on reduced costs
``c_ij - u_i - v_j``; the potentials keep every reduced cost nonnegative and
matched ones at zero, so ``r_i = exp(u_i)`` and ``s_j = exp(v_j) / a_j``
scale matched entries to magnitude one and every other entry to at most one.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StructuralSingularityError
from .sparse import SparseMatrix, transpose


@dataclass(frozen=True)
class ScalingResult:
    """``scaled_matrix = diag(row_scale) @ A[row_perm] @ diag(col_scale)``.

    ``row_perm[j]`` is the row matched to column j, so the matched entries
    land on the diagonal of the scaled matrix.  ``row_scale`` is indexed in
    the permuted row order.
    """

    row_perm: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray
    scaled_matrix: SparseMatrix

    def log_product(self, A: SparseMatrix) -> float:
        dense = A.to_dense()
        return float(np.sum(np.log(np.abs(dense[self.row_perm, np.arange(A.ncols)]))))


def max_product_matching(A: SparseMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(row_of_col, u, v, colmax)`` for the optimal transversal.

    Explicitly stored zeros are not edges.  Raises
    :class:`StructuralSingularityError` when no perfect matching exists.
    """
    if not A.is_square:
        raise DimensionError(f"matching needs a square matrix, got {A.shape}")
    n = A.nrows
    keep = A.values != 0.0
    At = transpose(
        SparseMatrix.from_unsorted(n, n, A.row_ids[keep], A.col_indices[keep], A.values[keep])
    )
    # At row j lists the rows of column j
    colmax = np.zeros(n)
    logabs = np.log(np.abs(At.values)) if At.nnz else np.zeros(0)
    for j in range(n):
        lo, hi = At.row_offsets[j], At.row_offsets[j + 1]
        if lo == hi:
            raise StructuralSingularityError(f"column {j} is empty")
        colmax[j] = np.abs(At.values[lo:hi]).max()
    cost = np.log(colmax)[At.row_ids] - logabs
    offsets, rows = At.row_offsets, At.col_indices

    u = np.zeros(n)
    v = np.zeros(n)
    row_of_col = np.full(n, -1, dtype=np.int64)
    col_of_row = np.full(n, -1, dtype=np.int64)

    for j0 in range(n):
        # Dijkstra over rows; column distances follow through matched edges
        dist_row = np.full(n, np.inf)
        dist_col = np.full(n, np.inf)
        pred_col = np.full(n, -1, dtype=np.int64)  # column from which a row was reached
        done_row = np.zeros(n, dtype=bool)
        dist_col[j0] = 0.0
        heap: list[tuple[float, int]] = []
        j, dj = j0, 0.0
        target = -1
        target_dist = np.inf
        while True:
            lo, hi = offsets[j], offsets[j + 1]
            for p in range(lo, hi):
                i = rows[p]
                if done_row[i]:
                    continue
                nd = dj + max(cost[p] - u[i] - v[j], 0.0)
                if nd < dist_row[i]:
                    dist_row[i] = nd
                    pred_col[i] = j
                    heapq.heappush(heap, (nd, i))
            while heap:
                d, i = heapq.heappop(heap)
                if not done_row[i] and d == dist_row[i]:
                    break
            else:
                raise StructuralSingularityError(
                    f"no augmenting path from column {j0}: matrix is structurally singular"
                )
            done_row[i] = True
            if col_of_row[i] < 0:
                target, target_dist = i, d
                break
            j = col_of_row[i]
            dj = d
            dist_col[j] = d

        # shifted Johnson update: reduced costs stay >= 0, the new edge becomes tight
        fin_r = done_row
        u[fin_r] -= target_dist - dist_row[fin_r]
        fin_c = dist_col < target_dist
        v[fin_c] += target_dist - dist_col[fin_c]
        # augment along predecessor chain
        i = target
        while True:
            j = pred_col[i]
            prev = row_of_col[j]
            row_of_col[j] = i
            col_of_row[i] = j
            if j == j0:
                break
            i = prev
    return row_of_col, u, v, colmax


def mc64_match_scale(A: SparseMatrix) -> ScalingResult:
    row_of_col, u, v, colmax = max_product_matching(A)
    row_scale = np.exp(u)[row_of_col]
    col_scale = np.exp(v) / colmax
    scaled = A.permute(row_perm=row_of_col).scale(row_scale, col_scale)
    return ScalingResult(row_of_col, row_scale, col_scale, scaled)


def structural_rank(A: SparseMatrix) -> int:
    """Size of a maximum bipartite matching of rows to columns (stored nonzeros)."""
    keep = A.values != 0.0
    M = SparseMatrix.from_unsorted(A.nrows, A.ncols, A.row_ids[keep], A.col_indices[keep], A.values[keep])
    row_of_col = np.full(A.ncols, -1, dtype=np.int64)
    rank = 0
    for i0 in range(A.nrows):
        # iterative DFS for an augmenting path starting at row i0
        seen = np.zeros(A.ncols, dtype=bool)
        stack = [(i0, M.row_offsets[i0])]
        via: list[int] = []
        found = False
        while stack:
            i, p = stack[-1]
            if p == M.row_offsets[i + 1]:
                stack.pop()
                if via:
                    via.pop()
                continue
            stack[-1] = (i, p + 1)
            j = int(M.col_indices[p])
            if seen[j]:
                continue
            seen[j] = True
            via.append(j)
            if row_of_col[j] < 0:
                found = True
                break
            stack.append((int(row_of_col[j]), M.row_offsets[row_of_col[j]]))
        if found:
            for (i, _), j in zip(stack, via):
                row_of_col[j] = i
            rank += 1
    return rank
