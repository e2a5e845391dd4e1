"""Row-block partitions and bordered block diagonal (arrowhead) orderings."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .factor import SchurFactor
from .sparse import SparseMatrix, add, transpose

Range = tuple[int, int]


def _from_triplets(nrows, ncols, rows, cols, vals, symmetry="general") -> SparseMatrix:
    return SparseMatrix.from_unsorted(nrows, ncols, rows, cols, vals, symmetry=symmetry)


# -- row partition ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RowPartition:
    """Contiguous row blocks, one per rank.

    ``offdiag_blocks[r]`` has one column per ghost of rank r, in the order of
    ``ghost_maps[r]``; each ghost is ``(owner_rank, global_index)``.
    """

    n: int
    nranks: int
    row_ranges: tuple[Range, ...]
    diag_blocks: tuple[SparseMatrix, ...]
    offdiag_blocks: tuple[SparseMatrix, ...]
    ghost_maps: tuple[tuple[tuple[int, int], ...], ...]

    def owner(self, i: int) -> int:
        for r, (lo, hi) in enumerate(self.row_ranges):
            if lo <= i < hi:
                return r
        raise IndexError(i)

    def ghost_columns(self, r: int) -> np.ndarray:
        return np.array([g for _, g in self.ghost_maps[r]], dtype=np.int64)

    def split(self, x: np.ndarray) -> list[np.ndarray]:
        return [np.array(x[lo:hi], dtype=np.float64) for lo, hi in self.row_ranges]

    def reassemble(self) -> SparseMatrix:
        rows, cols, vals = [], [], []
        for r, (lo, _) in enumerate(self.row_ranges):
            D, O = self.diag_blocks[r], self.offdiag_blocks[r]
            rows += [D.row_ids + lo, O.row_ids + lo]
            cols += [D.col_indices + lo, self.ghost_columns(r)[O.col_indices] if O.nnz else O.col_indices]
            vals += [D.values, O.values]
        return _from_triplets(self.n, self.n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def balanced_ranges(n: int, parts: int) -> tuple[Range, ...]:
    """Contiguous ranges covering [0, n) whose sizes differ by at most one."""
    base, extra = divmod(n, parts)
    out, lo = [], 0
    for r in range(parts):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return tuple(out)


def partition_rows(A: SparseMatrix, nranks: int, ranges: Sequence[Range] | None = None) -> RowPartition:
    if not A.is_square:
        raise DimensionError(f"partition_rows: matrix must be square, got {A.shape}")
    n = A.nrows
    if nranks < 1:
        raise ValueError("nranks must be at least 1")
    if nranks > n:
        raise ValueError(f"cannot split {n} rows over {nranks} ranks")
    if ranges is None:
        ranges = balanced_ranges(n, nranks)
    else:
        ranges = tuple((int(lo), int(hi)) for lo, hi in ranges)
        if len(ranges) != nranks or ranges[0][0] != 0 or ranges[-1][1] != n or any(
            a[1] != b[0] or a[0] > a[1] for a, b in zip(ranges, ranges[1:] + ((n, n),))
        ):
            raise ValueError(f"ranges {ranges} are not a contiguous cover of [0, {n})")
    owner = np.empty(n, dtype=np.int64)
    for r, (lo, hi) in enumerate(ranges):
        owner[lo:hi] = r

    diag, offd, ghosts = [], [], []
    for r, (lo, hi) in enumerate(ranges):
        a, b = A.row_offsets[lo], A.row_offsets[hi]
        rows = A.row_ids[a:b] - lo
        cols = A.col_indices[a:b]
        vals = A.values[a:b]
        local = (cols >= lo) & (cols < hi)
        diag.append(_from_triplets(hi - lo, hi - lo, rows[local], cols[local] - lo, vals[local]))
        gcols = np.unique(cols[~local])
        remap = np.searchsorted(gcols, cols[~local])
        offd.append(_from_triplets(hi - lo, gcols.size, rows[~local], remap, vals[~local]))
        ghosts.append(tuple((int(owner[g]), int(g)) for g in gcols))
    return RowPartition(n, nranks, ranges, tuple(diag), tuple(offd), tuple(ghosts))


# -- bordered block diagonal --------------------------------------------------


@dataclass(frozen=True, eq=False)
class BbdStructure:
    """``A[perm][:, perm]`` cut into blocks and a trailing interface.

    Per block b: ``diag_blocks[b]`` (A_bb), ``border_rows[b]`` (A_sb,
    interface rows by block columns) and ``border_cols[b]`` (A_bs).
    """

    n: int
    perm: np.ndarray
    nblocks: int
    block_ranges: tuple[Range, ...]
    interface_range: Range
    diag_blocks: tuple[SparseMatrix, ...]
    border_rows: tuple[SparseMatrix, ...]
    border_cols: tuple[SparseMatrix, ...]
    interface_block: SparseMatrix

    @property
    def interface_size(self) -> int:
        lo, hi = self.interface_range
        return hi - lo

    def reassemble(self) -> SparseMatrix:
        """Rebuild the permuted matrix from the stored pieces."""
        rows, cols, vals = [], [], []
        s0 = self.interface_range[0]
        for b, (lo, _) in enumerate(self.block_ranges):
            D, R, C = self.diag_blocks[b], self.border_rows[b], self.border_cols[b]
            rows += [D.row_ids + lo, R.row_ids + s0, C.row_ids + lo]
            cols += [D.col_indices + lo, R.col_indices + lo, C.col_indices + s0]
            vals += [D.values, R.values, C.values]
        S = self.interface_block
        rows.append(S.row_ids + s0)
        cols.append(S.col_indices + s0)
        vals.append(S.values)
        return _from_triplets(self.n, self.n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))

    def block_of(self) -> np.ndarray:
        """Block id per permuted index; the interface is ``nblocks``."""
        out = np.full(self.n, self.nblocks, dtype=np.int64)
        for b, (lo, hi) in enumerate(self.block_ranges):
            out[lo:hi] = b
        return out

    def dump(self, path) -> None:
        """Text sidecar: the permutation, then one range per line."""
        lines = ["perm " + " ".join(map(str, self.perm.tolist()))]
        lines += [f"block {b} {lo} {hi}" for b, (lo, hi) in enumerate(self.block_ranges)]
        lines.append(f"interface {self.interface_range[0]} {self.interface_range[1]}")
        Path(path).write_text("\n".join(lines) + "\n")


def _adjacency(A: SparseMatrix) -> list[np.ndarray]:
    """Sorted neighbour lists of the symmetrized pattern, no self loops."""
    n = A.nrows
    At = transpose(A)
    rows = np.concatenate([A.row_ids, At.row_ids])
    cols = np.concatenate([A.col_indices, At.col_indices])
    off = rows != cols
    G = _from_triplets(n, n, rows[off], cols[off], np.ones(int(off.sum())))
    return [G.col_indices[G.row_offsets[i] : G.row_offsets[i + 1]] for i in range(n)]


def _bfs(adj, start: int, member: np.ndarray) -> list[int]:
    """BFS order restricted to ``member``; neighbours visited lowest first."""
    seen = {start}
    order = [start]
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            w = int(w)
            if member[w] and w not in seen:
                seen.add(w)
                order.append(w)
                queue.append(w)
    return order


def _bfs_levels(adj, start: int, member: np.ndarray) -> tuple[list[int], dict[int, int]]:
    level = {start: 0}
    order = [start]
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            w = int(w)
            if member[w] and w not in level:
                level[w] = level[v] + 1
                order.append(w)
                queue.append(w)
    return order, level


def _components(adj, verts: list[int], member: np.ndarray) -> list[list[int]]:
    seen = np.zeros(member.size, dtype=bool)
    comps = []
    for v in verts:
        if not seen[v]:
            comp = _bfs(adj, v, member)
            seen[comp] = True
            comps.append(sorted(comp))
    return comps


def _pseudo_peripheral(adj, verts: list[int], member: np.ndarray) -> tuple[list[int], dict[int, int]]:
    """Start from the lowest vertex; hop to the lowest farthest vertex until the depth stops growing."""
    order, level = _bfs_levels(adj, verts[0], member)
    depth = max(level.values())
    while True:
        far = min(v for v in order if level[v] == depth)
        order2, level2 = _bfs_levels(adj, far, member)
        depth2 = max(level2.values())
        if depth2 <= depth:
            return order, level
        order, level, depth = order2, level2, depth2


def _dissect(adj, verts: list[int], k: int, member: np.ndarray, separators: list[int]) -> list[list[int]]:
    """Split ``verts`` into ``k`` mutually uncoupled blocks, appending separators."""
    if k == 1 or not verts:
        return [verts] + [[] for _ in range(k - 1)]
    k1 = k // 2
    k2 = k - k1
    comps = _components(adj, verts, member)
    if len(comps) > 1:
        groups: list[list[int]] = [[], []]
        load = [0, 0]
        targets = (k1, k2)
        for comp in sorted(comps, key=lambda c: (-len(c), c[0])):
            g = 0 if load[0] / targets[0] <= load[1] / targets[1] else 1
            groups[g] += comp
            load[g] += len(comp)
        side_a, side_b = sorted(groups[0]), sorted(groups[1])
    else:
        order, level = _pseudo_peripheral(adj, verts, member)
        depth = max(level.values())
        if depth == 0:
            return [verts] + [[] for _ in range(k - 1)]
        lev = np.array([level[v] for v in order])
        counts = np.bincount(lev, minlength=depth + 1)
        # cut between levels L-1 and L; the separator is the part of level
        # L-1 touching level L, which is all of it in BFS level structures
        best, best_cut = None, 1
        for cut in range(1, depth + 1):
            a = int(counts[:cut].sum() - counts[cut - 1])
            b = int(counts[cut:].sum())
            score = abs(a * k2 - b * k1)
            if best is None or score < best:
                best, best_cut = score, cut
        sep = [v for v in order if level[v] == best_cut - 1]
        for v in sep:
            member[v] = False
        separators.extend(sep)
        side_a = sorted(v for v in order if level[v] < best_cut - 1)
        side_b = sorted(v for v in order if level[v] >= best_cut)
    return _dissect(adj, side_a, k1, member, separators) + _dissect(adj, side_b, k2, member, separators)


def nested_dissection_bbd(A: SparseMatrix, nblocks: int) -> BbdStructure:
    """Recursive bisection into ``nblocks`` blocks plus a trailing interface."""
    if not A.is_square:
        raise DimensionError(f"nested_dissection_bbd: matrix must be square, got {A.shape}")
    n = A.nrows
    if nblocks < 1:
        raise ValueError("nblocks must be at least 1")
    if nblocks > n:
        raise ValueError(f"cannot form {nblocks} blocks from {n} vertices")
    adj = _adjacency(A)
    member = np.ones(n, dtype=bool)
    separators: list[int] = []
    blocks = _dissect(adj, list(range(n)), nblocks, member, separators)
    perm = np.array([v for blk in blocks for v in blk] + separators, dtype=np.int64)
    return bbd_from_perm(A, perm, [len(b) for b in blocks])


def _keep_tag(M: SparseMatrix, symmetry) -> SparseMatrix:
    # principal submatrices of a symmetric permutation inherit the tag
    return M if symmetry == "general" else M.with_symmetry(symmetry)


def bbd_from_perm(A: SparseMatrix, perm, block_sizes: Sequence[int]) -> BbdStructure:
    """Cut ``A[perm][:, perm]`` into the given leading blocks and the interface."""
    n = A.nrows
    perm = np.asarray(perm, dtype=np.int64)
    ranges, lo = [], 0
    for sz in block_sizes:
        ranges.append((lo, lo + int(sz)))
        lo += int(sz)
    if lo > n:
        raise DimensionError("block sizes exceed the matrix dimension")
    iface = (lo, n)
    Ap = A.permute(perm, perm)
    diag, brow, bcol = [], [], []
    for b0, b1 in ranges:
        diag.append(_keep_tag(Ap.submatrix(np.arange(b0, b1), np.arange(b0, b1)), A.symmetry))
        brow.append(Ap.submatrix(np.arange(*iface), np.arange(b0, b1)))
        bcol.append(Ap.submatrix(np.arange(b0, b1), np.arange(*iface)))
    S = _keep_tag(Ap.submatrix(np.arange(*iface), np.arange(*iface)), A.symmetry)
    out = BbdStructure(n, perm, len(ranges), tuple(ranges), iface, tuple(diag), tuple(brow), tuple(bcol), S)
    # every entry must sit in some stored piece
    if out.reassemble().nnz != Ap.nnz:
        raise ValueError("permutation couples distinct blocks; not a bordered block diagonal form")
    return out


def assemble_schur(S: BbdStructure, contribs: Sequence[SchurFactor]) -> SparseMatrix:
    """``interface_block - sum_b contrib_b``, summed in block order."""
    if len(contribs) != S.nblocks:
        raise DimensionError(f"expected {S.nblocks} Schur contributions, got {len(contribs)}")
    out = S.interface_block
    ns = S.interface_size
    for c in contribs:
        if c.schur_contrib.shape != (ns, ns):
            raise DimensionError(f"Schur contribution shape {c.schur_contrib.shape} != ({ns}, {ns})")
        out = add(out, c.schur_contrib, 1.0, -1.0)
    if S.interface_block.symmetry != "general":
        dense = out.to_dense()
        dense = 0.5 * (dense + dense.T)
        out = out.with_values(dense[out.row_ids, out.col_indices], symmetry=S.interface_block.symmetry)
    return out
