"""Simulated message-passing ranks and the distributed kernels built on them.

Execution is bulk-synchronous: :meth:`RankGroup.superstep` runs one function
per rank, and messages sent during a superstep are delivered at the start of
the next one.  Ranks share no mutable state, and delivery order depends only
on ``(src, send order)``, so the sequential, shuffled and threaded schedules
produce bitwise-identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Sequence

import numpy as np

from .decomp import BbdStructure, RowPartition, assemble_schur, nested_dissection_bbd, partition_rows
from .errors import DeadlockError, DimensionError, PatternMismatchError, PivotError, StructuralSingularityError
from .factor import FactorBundle, FactorKind, SchurFactor, factorize, lu_complete, numeric, schur_partial_factor, symbolic
from .precond import Prepared, Recipe, prepare_matrix
from .sparse import SparseMatrix, spmv

log = logging.getLogger(__name__)

Schedule = Literal["sequential", "shuffled", "threaded"]


@dataclass(frozen=True)
class Message:
    step: int
    src: int
    dst: int
    tag: str
    payload: Any

    @property
    def nbytes(self) -> int:
        return _payload_bytes(self.payload)


def _payload_bytes(p) -> int:
    if isinstance(p, np.ndarray):
        return int(p.nbytes)
    if isinstance(p, SparseMatrix):
        return int(p.values.nbytes + p.col_indices.nbytes + p.row_offsets.nbytes)
    if isinstance(p, (list, tuple)):
        return sum(_payload_bytes(q) for q in p)
    if p is None:
        return 0
    return 8


class RankContext:
    """What one rank sees during a superstep."""

    def __init__(self, rank: int, nranks: int, step: int, inbox: list[Message]):
        self.rank = rank
        self.nranks = nranks
        self.step = step
        self._inbox = inbox
        self.outbox: list[Message] = []

    def send(self, dst: int, tag: str, payload) -> None:
        if not 0 <= dst < self.nranks:
            raise ValueError(f"rank {self.rank}: destination {dst} out of range")
        self.outbox.append(Message(self.step, self.rank, dst, tag, payload))

    def recv(self, src: int, tag: str):
        """Take the oldest pending message from ``src`` with ``tag``."""
        for k, m in enumerate(self._inbox):
            if m.src == src and m.tag == tag:
                return self._inbox.pop(k).payload
        raise DeadlockError(
            f"rank {self.rank} waits for {tag!r} from rank {src} at superstep {self.step}, nothing was sent"
        )

    def recv_all(self, tag: str) -> list[tuple[int, Any]]:
        """All pending ``tag`` messages as ``(src, payload)``, ascending source."""
        got = [m for m in self._inbox if m.tag == tag]
        self._inbox[:] = [m for m in self._inbox if m.tag != tag]
        return sorted(((m.src, m.payload) for m in got), key=lambda t: t[0])


@dataclass
class TraceEntry:
    step: int
    src: int
    dst: int
    tag: str
    nbytes: int

    def line(self) -> str:
        return f"{self.step} {self.src} {self.dst} {self.tag} {self.nbytes}"


class RankGroup:
    """A fixed set of ranks with a message transport and optional trace.

    ``max_supersteps`` is the watchdog budget: exceeding it raises
    :class:`DeadlockError`, as does receiving a message nobody sent.
    """

    def __init__(
        self,
        nranks: int,
        schedule: Schedule = "sequential",
        seed: int = 0,
        trace: bool = True,
        max_supersteps: int = 10_000_000,
    ):
        if nranks < 1:
            raise ValueError("nranks must be at least 1")
        if schedule not in ("sequential", "shuffled", "threaded"):
            raise ValueError(f"unknown schedule {schedule!r}")
        self.nranks = nranks
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        self.trace_enabled = trace
        self.trace: list[TraceEntry] = []
        self.max_supersteps = max_supersteps
        self.step = 0
        self._pending: list[list[Message]] = [[] for _ in range(nranks)]

    def superstep(self, fn: Callable[[RankContext], Any]) -> list[Any]:
        """Run ``fn`` on every rank; returns the per-rank results in rank order."""
        if self.step >= self.max_supersteps:
            raise DeadlockError(f"watchdog: superstep budget {self.max_supersteps} exhausted")
        ctxs = [RankContext(r, self.nranks, self.step, self._pending[r]) for r in range(self.nranks)]
        results: list[Any] = [None] * self.nranks

        def run(r: int):
            results[r] = fn(ctxs[r])

        if self.schedule == "threaded" and self.nranks > 1:
            with ThreadPoolExecutor(max_workers=self.nranks) as pool:
                for fut in [pool.submit(run, r) for r in range(self.nranks)]:
                    fut.result()
        else:
            order = range(self.nranks)
            if self.schedule == "shuffled":
                order = self.rng.permutation(self.nranks).tolist()
            for r in order:
                run(r)

        leftover = [(r, m.tag, m.src) for r, c in enumerate(ctxs) for m in c._inbox]
        if leftover:
            raise DeadlockError(f"unconsumed messages after superstep {self.step}: {leftover[:5]}")
        self._pending = [[] for _ in range(self.nranks)]
        for c in ctxs:  # rank order keeps delivery independent of the schedule
            for m in c.outbox:
                self._pending[m.dst].append(m)
                if self.trace_enabled:
                    self.trace.append(TraceEntry(m.step, m.src, m.dst, m.tag, m.nbytes))
        self.step += 1
        return results

    def count(self, tag: str | None = None) -> int:
        return sum(1 for t in self.trace if tag is None or t.tag == tag)

    def clear_trace(self) -> None:
        self.trace.clear()

    def dump_trace(self, path) -> None:
        Path(path).write_text("".join(t.line() + "\n" for t in self.trace))


# -- collectives --------------------------------------------------------------


def _check_count(g: RankGroup, values: Sequence) -> None:
    if len(values) != g.nranks:
        raise DimensionError(f"collective got {len(values)} contributions for {g.nranks} ranks")


def allreduce_sum(g: RankGroup, local: Sequence[float]) -> list[float]:
    """Sum in rank-ascending order at rank 0, then hand the result to all."""
    _check_count(g, local)

    def up(ctx):
        if ctx.rank:
            ctx.send(0, "allreduce_up", float(local[ctx.rank]))

    def down(ctx):
        if ctx.rank == 0:
            total = float(local[0])
            for _, v in ctx.recv_all("allreduce_up"):
                total += v
            for r in range(1, ctx.nranks):
                ctx.send(r, "allreduce_down", total)
            return total

    g.superstep(up)
    roots = g.superstep(down)
    rest = g.superstep(lambda ctx: roots[0] if ctx.rank == 0 else ctx.recv(0, "allreduce_down"))
    return rest


def reduce_to_root(g: RankGroup, local: Sequence, tag: str = "reduce"):
    """Elementwise sum at rank 0 (arrays or SparseMatrix), rank-ascending."""
    _check_count(g, local)

    def up(ctx):
        if ctx.rank:
            ctx.send(0, tag, local[ctx.rank])

    g.superstep(up)

    def root(ctx):
        if ctx.rank != 0:
            return None
        acc = local[0]
        for _, v in ctx.recv_all(tag):
            acc = _plus(acc, v)
        return acc

    return g.superstep(root)[0]


def _plus(a, b):
    if isinstance(a, SparseMatrix):
        from .sparse import add

        return add(a, b)
    return a + b


def broadcast(g: RankGroup, payload, tag: str = "bcast") -> list:
    def out(ctx):
        if ctx.rank == 0:
            for r in range(1, ctx.nranks):
                ctx.send(r, tag, payload)

    g.superstep(out)
    return g.superstep(lambda ctx: payload if ctx.rank == 0 else ctx.recv(0, tag))


# -- distributed vectors ------------------------------------------------------


@dataclass
class DistVector:
    """Per-rank segments; ``gather`` concatenates them in rank order."""

    segments: list[np.ndarray]
    layout: Any = None

    @classmethod
    def scatter(cls, x, part: RowPartition) -> "DistVector":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (part.n,):
            raise DimensionError(f"vector of shape {x.shape} for a layout of size {part.n}")
        return cls(part.split(x), part)

    def gather(self) -> np.ndarray:
        return np.concatenate(self.segments) if self.segments else np.zeros(0)


def dist_spmv(g: RankGroup, part: RowPartition, x: DistVector) -> DistVector:
    """y = A x with one ghost message per (owner, requester) pair."""
    if x.layout is not part or len(x.segments) != part.nranks or g.nranks != part.nranks:
        raise DimensionError("dist_spmv: vector layout does not match the partition")
    needs = _ghost_requests(part)

    def exchange(ctx):
        lo = part.row_ranges[ctx.rank][0]
        for requester, idx in needs[ctx.rank]:
            ctx.send(requester, "ghost", x.segments[ctx.rank][idx - lo])

    def compute(ctx):
        r = ctx.rank
        owners = sorted({o for o, _ in part.ghost_maps[r]})
        ghost = np.concatenate([ctx.recv(o, "ghost") for o in owners]) if owners else np.zeros(0)
        y = spmv(part.diag_blocks[r], x.segments[r])
        if part.offdiag_blocks[r].nnz:
            y = y + spmv(part.offdiag_blocks[r], ghost)
        return y

    g.superstep(exchange)
    return DistVector(g.superstep(compute), part)


def _ghost_requests(part: RowPartition) -> list[list[tuple[int, np.ndarray]]]:
    """For each owner, ``(requester, global indices)`` in requester order."""
    out: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(part.nranks)]
    for r in range(part.nranks):
        by_owner: dict[int, list[int]] = {}
        for o, gidx in part.ghost_maps[r]:
            by_owner.setdefault(o, []).append(gidx)
        for o in sorted(by_owner):
            out[o].append((r, np.array(by_owner[o], dtype=np.int64)))
    for lst in out:
        lst.sort(key=lambda t: t[0])
    return out


# -- block Jacobi -------------------------------------------------------------


def bj_factor(g: RankGroup, part: RowPartition, kind: FactorKind = "ilu0", syms=None) -> list[FactorBundle]:
    """Factor each rank's diagonal block locally (no messages)."""

    def work(ctx):
        D = part.diag_blocks[ctx.rank]
        try:
            if syms is None:
                return factorize(D, kind)
            return numeric(D, syms[ctx.rank], kind)
        except PivotError as err:
            raise err.with_block(ctx.rank) from None

    return g.superstep(work)


def bj_apply(g: RankGroup, part: RowPartition, factors: Sequence[FactorBundle], r: DistVector) -> DistVector:
    if len(factors) != part.nranks or len(r.segments) != part.nranks:
        raise DimensionError("bj_apply: one factor and one segment per rank required")
    return DistVector(g.superstep(lambda ctx: factors[ctx.rank].solve(r.segments[ctx.rank])), part)


# -- bordered block diagonal --------------------------------------------------


@dataclass(frozen=True, eq=False)
class BbdFactors:
    structure: BbdStructure
    blocks: tuple[SchurFactor, ...]
    interface: FactorBundle | None
    schur: SparseMatrix


def bbd_split(S: BbdStructure, xp: np.ndarray) -> DistVector:
    """Permuted global vector -> per-rank segments; rank 0 also holds the interface."""
    segs = [np.array(xp[lo:hi]) for lo, hi in S.block_ranges]
    lo, hi = S.interface_range
    segs[0] = np.concatenate([segs[0], xp[lo:hi]])
    return DistVector(segs, S)


def bbd_join(S: BbdStructure, v: DistVector) -> np.ndarray:
    out = np.empty(S.n)
    n0 = S.block_ranges[0][1] - S.block_ranges[0][0]
    for b, (lo, hi) in enumerate(S.block_ranges):
        out[lo:hi] = v.segments[b][: hi - lo]
    lo, hi = S.interface_range
    out[lo:hi] = v.segments[0][n0:]
    return out


def bbd_factor(
    g: RankGroup,
    S: BbdStructure,
    mode: Literal["complete_lu", "ilu0"] = "complete_lu",
    syms=None,
) -> BbdFactors:
    """Per-block Schur pieces reduced to rank 0, which factors the interface."""
    if g.nranks != S.nblocks:
        raise DimensionError(f"bbd_factor needs one block per rank ({S.nblocks} blocks, {g.nranks} ranks)")
    kind: FactorKind = "lu_complete" if mode == "complete_lu" else "ilu0"

    def local(ctx):
        b = ctx.rank
        try:
            if syms is None:
                interior = factorize(S.diag_blocks[b], kind)
            else:
                interior = numeric(S.diag_blocks[b], syms[b], kind)
        except PivotError as err:
            raise err.with_block(b) from None
        sf = schur_partial_factor(S.diag_blocks[b], S.border_cols[b], S.border_rows[b], kind, interior)
        if b:
            ctx.send(0, "schur_reduce", sf.schur_contrib)
        return sf

    blocks = g.superstep(local)

    def root(ctx):
        if ctx.rank != 0:
            return None
        got = dict(ctx.recv_all("schur_reduce"))
        contribs = [blocks[0]] + [
            SchurFactor(blocks[b].interior, blocks[b].border_row, blocks[b].border_col, got[b])
            for b in range(1, ctx.nranks)
        ]
        schur = assemble_schur(S, contribs)
        if schur.nrows == 0:
            return schur, None
        try:
            return schur, lu_complete(schur)
        except PivotError as err:
            raise StructuralSingularityError(f"interface Schur complement is singular: {err}") from err

    schur, iface = g.superstep(root)[0]
    return BbdFactors(S, tuple(blocks), iface, schur)


def bbd_apply(g: RankGroup, F: BbdFactors, r: DistVector) -> DistVector:
    """Block elimination solve: local forward, gather, interface, broadcast, local backward."""
    S = F.structure
    ns = S.interface_size
    n0 = S.block_ranges[0][1] - S.block_ranges[0][0]
    if len(r.segments) != S.nblocks:
        raise DimensionError("bbd_apply: one segment per block required")

    def forward(ctx):
        b = ctx.rank
        rb = r.segments[b][: S.block_ranges[b][1] - S.block_ranges[b][0]]
        y = F.blocks[b].interior.solve(rb)
        t = spmv(F.blocks[b].border_row, y) if ns else np.zeros(0)
        if b:
            ctx.send(0, "bbd_gather", t)
        return t

    ts = g.superstep(forward)

    def interface(ctx):
        if ctx.rank != 0:
            return None
        rs = r.segments[0][n0:].copy()
        rs -= ts[0]
        for _, t in ctx.recv_all("bbd_gather"):
            rs -= t
        xs = F.interface.solve(rs) if ns else np.zeros(0)
        for dst in range(1, ctx.nranks):
            ctx.send(dst, "bbd_bcast", xs)
        return xs

    xs0 = g.superstep(interface)[0]

    def backward(ctx):
        b = ctx.rank
        xs = xs0 if b == 0 else ctx.recv(0, "bbd_bcast")
        rb = r.segments[b][: S.block_ranges[b][1] - S.block_ranges[b][0]]
        if ns:
            rb = rb - spmv(F.blocks[b].border_col, xs)
        xb = F.blocks[b].interior.solve(rb)
        return np.concatenate([xb, xs]) if b == 0 else xb

    return DistVector(g.superstep(backward), S)


def bbd_messages_per_solve(nranks: int) -> int:
    return 2 * (nranks - 1)


# -- preconditioners over the global vector -----------------------------------


@dataclass(eq=False)
class DistributedPreconditioner:
    """A BJ or BBD preconditioner behind a global-vector interface.

    The matching/scaling/filter/correction stages are applied to the whole
    matrix first (``prep``); the result is then laid out over the ranks.
    """

    method: Literal["bj", "bbd"]
    group: RankGroup
    prep: Prepared
    part: RowPartition | None = None
    bj_factors: list[FactorBundle] | None = None
    bbd: BbdFactors | None = None
    notes: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.prep.matrix.nrows

    def apply(self, r: np.ndarray) -> np.ndarray:
        y = self.prep.rhs_in(np.asarray(r, dtype=np.float64))
        if self.method == "bj":
            z = bj_apply(self.group, self.part, self.bj_factors, DistVector.scatter(y, self.part)).gather()
        else:
            S = self.bbd.structure
            zp = bbd_join(S, bbd_apply(self.group, self.bbd, bbd_split(S, y[S.perm])))
            z = np.empty_like(zp)
            z[S.perm] = zp
        return self.prep.sol_out(z)

    def as_preconditioner(self):
        from .krylov import Preconditioner

        return Preconditioner(self.n, self.apply)


@dataclass
class BjBuilder:
    """Block Jacobi over ``nranks`` contiguous row blocks."""

    group: RankGroup
    recipe: Recipe = field(default_factory=lambda: Recipe(kind="ilu0"))

    def _assemble(self, A, state, syms):
        prep = prepare_matrix(A, self.recipe, state["scaling"] if state else None)
        part = partition_rows(prep.matrix, self.group.nranks)
        return prep, part

    def symbolic(self, A: SparseMatrix) -> dict:
        prep, part = self._assemble(A, None, None)
        syms = [symbolic(D, self.recipe.kind) for D in part.diag_blocks]
        return {"scaling": prep.scaling, "syms": syms, "hash": prep.matrix.pattern_hash()}

    def numeric(self, A: SparseMatrix, state: dict) -> DistributedPreconditioner:
        prep, part = self._assemble(A, state, None)
        if prep.matrix.pattern_hash() != state["hash"]:
            raise PatternMismatchError("prepared matrix pattern changed")
        factors = bj_factor(self.group, part, self.recipe.kind, state["syms"])
        return self._finish(prep, part, factors)

    def build(self, A: SparseMatrix):
        prep, part = self._assemble(A, None, None)
        factors = bj_factor(self.group, part, self.recipe.kind)
        state = {
            "scaling": prep.scaling,
            "syms": [symbolic(D, self.recipe.kind) for D in part.diag_blocks],
            "hash": prep.matrix.pattern_hash(),
        }
        return state, self._finish(prep, part, factors)

    def _finish(self, prep, part, factors):
        return DistributedPreconditioner(
            "bj",
            self.group,
            prep,
            part=part,
            bj_factors=factors,
            notes={
                "prepared_lower_nnz": prep.matrix.lower_nnz(),
                "unfiltered_lower_nnz": prep.unfiltered_lower_nnz,
            },
        )


@dataclass
class BbdBuilder:
    """Bordered block diagonal with one block per rank."""

    group: RankGroup
    recipe: Recipe = field(default_factory=lambda: Recipe(kind="lu_complete", mc64=True, delta=1e-12))

    @property
    def mode(self) -> str:
        return "ilu0" if self.recipe.kind == "ilu0" else "complete_lu"

    def _kind(self) -> FactorKind:
        return "ilu0" if self.recipe.kind == "ilu0" else "lu_complete"

    def build(self, A: SparseMatrix):
        prep = prepare_matrix(A, self.recipe)
        S = nested_dissection_bbd(prep.matrix, self.group.nranks)
        F = bbd_factor(self.group, S, self.mode)
        state = {
            "scaling": prep.scaling,
            "perm": S.perm,
            "sizes": [hi - lo for lo, hi in S.block_ranges],
            "syms": [symbolic(D, self._kind()) for D in S.diag_blocks],
            "hash": prep.matrix.pattern_hash(),
        }
        return state, self._finish(prep, F)

    def symbolic(self, A: SparseMatrix) -> dict:
        return self.build(A)[0]

    def numeric(self, A: SparseMatrix, state: dict) -> DistributedPreconditioner:
        from .decomp import bbd_from_perm

        prep = prepare_matrix(A, self.recipe, state["scaling"])
        if prep.matrix.pattern_hash() != state["hash"]:
            raise PatternMismatchError("prepared matrix pattern changed")
        S = bbd_from_perm(prep.matrix, state["perm"], state["sizes"])
        F = bbd_factor(self.group, S, self.mode, state["syms"])
        return self._finish(prep, F)

    def _finish(self, prep, F):
        return DistributedPreconditioner(
            "bbd",
            self.group,
            prep,
            bbd=F,
            notes={
                "prepared_lower_nnz": prep.matrix.lower_nnz(),
                "unfiltered_lower_nnz": prep.unfiltered_lower_nnz,
                "interface_size": F.structure.interface_size,
            },
        )


def distributed_operator(g: RankGroup, A: SparseMatrix):
    """A :class:`LinearOperator` whose products run through :func:`dist_spmv`."""
    from .krylov import LinearOperator

    part = partition_rows(A, g.nranks)

    def apply(x):
        return dist_spmv(g, part, DistVector.scatter(x, part)).gather()

    return LinearOperator(A.nrows, apply, A.symmetry), part
