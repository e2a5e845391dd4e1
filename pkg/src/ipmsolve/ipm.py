"""Primal-dual path-following interior-point method for standard-form LP.

    minimize c^T x  subject to  B x = b,  x >= 0

Each step solves the normal equations ``B D^{-1} B^T dlam = rhs`` with
``D = X^{-1} S`` through a distributed preconditioned Krylov solve, starting
with block Jacobi and switching once, permanently, to the bordered block
diagonal method if a solve fails.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .errors import ConstructionError, DimensionError, PivotError, StructuralSingularityError
from .krylov import KrylovConfig, SolveReport, solve_right_preconditioned
from .matching import structural_rank
from .precond import FilterConfig, PrecondCache, Recipe, ReusePolicy, relaxed_tau, reuse_step
from .runtime import BbdBuilder, BjBuilder, RankGroup, Schedule, distributed_operator
from .sparse import SparseMatrix, spgemm_normal, spmv, transpose

log = logging.getLogger(__name__)

MethodName = Literal["block_jacobi", "bbd"]
IpmStatus = Literal["optimal", "iteration_limit", "solver_failure"]


@dataclass(frozen=True, eq=False)
class LpProblem:
    B: SparseMatrix
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        m, n = self.B.shape
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if b.shape != (m,) or c.shape != (n,):
            raise DimensionError(f"B is {m}x{n} but b has shape {b.shape} and c {c.shape}")
        if m > n:
            raise DimensionError(f"more constraints ({m}) than variables ({n})")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(c)) and np.all(np.isfinite(self.B.values))):
            raise ValueError("LP data contains non-finite values")
        if structural_rank(self.B) < m:
            raise StructuralSingularityError("constraint matrix is structurally rank deficient")

    @property
    def m(self) -> int:
        return self.B.nrows

    @property
    def n(self) -> int:
        return self.B.ncols


@dataclass
class IpmState:
    x: np.ndarray
    s: np.ndarray
    lam: np.ndarray
    mu: float
    step: int = 0
    method: MethodName = "block_jacobi"
    switched: bool = False

    @classmethod
    def initial(cls, prob: LpProblem, method: MethodName = "block_jacobi") -> "IpmState":
        x = np.ones(prob.n)
        s = np.ones(prob.n)
        return cls(x, s, np.zeros(prob.m), float(x @ s) / prob.n, 0, method)


@dataclass(frozen=True)
class IpmConfig:
    tol_kkt: float = 1e-8
    max_steps: int = 100
    sigma: float = 0.1
    step_fraction: float = 0.995
    solver_cfg: KrylovConfig = KrylovConfig(method="gcr", rel_tol=1e-8, max_iters=500)
    method: Literal["auto", "bj", "bbd"] = "auto"
    bj_krylov: Literal["cg", "bicgstab", "gcr"] = "bicgstab"
    bbd_krylov: Literal["cg", "bicgstab", "gcr"] = "gcr"
    bj_factor: Literal["ilu0", "lu_complete"] = "ilu0"
    bbd_factor: Literal["ilu0", "lu_complete"] = "lu_complete"
    bj_max_iters: int | None = None
    filter: FilterConfig | None = None
    delta: float = 1e-12
    reuse: ReusePolicy = ReusePolicy()
    nranks: int = 2
    schedule: Schedule = "sequential"
    seed: int = 0
    timing: bool = False
    # (step, method) -> True makes that attempt count as failed
    fault_injector: Callable[[int, str], bool] | None = None
    # called with the state after every accepted step
    on_step: Callable[[IpmState], None] | None = None

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")
        if not self.tol_kkt > 0:
            raise ValueError("tol_kkt must be positive")
        if self.max_steps < 1 or self.nranks < 1:
            raise ValueError("max_steps and nranks must be at least 1")
        if self.method not in ("auto", "bj", "bbd"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass
class StepLog:
    step: int
    method: MethodName
    tau: float | None
    nnz_l: int
    nnz_ratio: float
    iterations: int
    relres: float
    reuse: str
    accepted: bool
    mu: float
    primal_res: float
    dual_res: float
    seconds: float = 0.0


@dataclass
class IpmReport:
    status: IpmStatus
    steps: int
    objective: float
    primal_res: float
    dual_res: float
    mu: float
    log: list[StepLog] = field(default_factory=list)

    @property
    def method_sequence(self) -> list[str]:
        """Method of every solve attempt, failed ones included."""
        return [r.method for r in self.log]

    @property
    def accepted(self) -> list[StepLog]:
        return [r for r in self.log if r.accepted]


# -- Newton system pieces -----------------------------------------------------


def residuals(prob: LpProblem, st: IpmState) -> tuple[np.ndarray, np.ndarray]:
    """(b - Bx, c - B^T lam - s)."""
    rp = prob.b - spmv(prob.B, st.x)
    rc = prob.c - spmv(transpose(prob.B), st.lam) - st.s
    return rp, rc


def kkt_measures(prob: LpProblem, st: IpmState) -> tuple[float, float, float]:
    rp, rc = residuals(prob, st)
    pres = float(np.linalg.norm(rp)) / (1.0 + float(np.linalg.norm(prob.b)))
    dres = float(np.linalg.norm(rc)) / (1.0 + float(np.linalg.norm(prob.c)))
    return pres, dres, float(st.x @ st.s) / prob.n


def _r1(prob: LpProblem, st: IpmState, sigma: float) -> np.ndarray:
    # c - B^T lam - sigma mu X^{-1} e
    return prob.c - spmv(transpose(prob.B), st.lam) - sigma * st.mu / st.x


def assemble_normal_system(prob: LpProblem, st: IpmState, sigma: float = 0.1) -> tuple[SparseMatrix, np.ndarray]:
    """``S_r = B D^{-1} B^T`` and ``rhs = r2 + B D^{-1} r1`` with ``D = S X^{-1}``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        d = st.s / st.x
        dinv = st.x / st.s
    if not (np.all(np.isfinite(d)) and np.all(d > 0) and np.all(np.isfinite(dinv))):
        raise ValueError("iterate left the interior: D has non-finite or nonpositive entries")
    Sr = spgemm_normal(prob.B, dinv)
    r2 = prob.b - spmv(prob.B, st.x)
    rhs = r2 + spmv(prob.B, dinv * _r1(prob, st, sigma))
    return Sr, rhs


def recover_dx(prob: LpProblem, st: IpmState, dlam: np.ndarray, sigma: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Back-substitute ``dx = D^{-1}(B^T dlam - r1)`` and ``ds = r_c - B^T dlam``."""
    Btdl = spmv(transpose(prob.B), dlam)
    dx = (st.x / st.s) * (Btdl - _r1(prob, st, sigma))
    _, rc = residuals(prob, st)
    ds = rc - Btdl
    return dx, ds


def newton_residual(prob: LpProblem, st: IpmState, dx, dlam, ds, sigma: float = 0.1) -> float:
    """Largest relative residual of the three linearized KKT rows."""
    rp, rc = residuals(prob, st)
    rxs = sigma * st.mu - st.x * st.s
    rows = (
        (spmv(prob.B, dx), rp),
        (spmv(transpose(prob.B), dlam) + ds, rc),
        (st.s * dx + st.x * ds, rxs),
    )
    return max(float(np.linalg.norm(lhs - rhs)) / (1.0 + float(np.linalg.norm(rhs))) for lhs, rhs in rows)


def _max_step(v: np.ndarray, dv: np.ndarray, fraction: float) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, fraction * float(np.min(-v[neg] / dv[neg])))


# -- method switching ---------------------------------------------------------

Verdict = Literal["accept", "retry", "fail"]


def switching_step(st: IpmState, solve_result: SolveReport | None, allow_switch: bool = True) -> tuple[IpmState, Verdict]:
    """Decide what follows a solve attempt.

    ``solve_result`` is None when the preconditioner could not be built.
    A first failure under block Jacobi moves to BBD for good and asks for the
    same step to be retried; any failure after that is terminal.
    """
    ok = solve_result is not None and solve_result.converged
    if ok:
        return st, "accept"
    if st.method == "block_jacobi" and not st.switched and allow_switch:
        return replace(st, method="bbd", switched=True), "retry"
    return st, "fail"


# -- driver -------------------------------------------------------------------


def make_group(prob: LpProblem, cfg: IpmConfig) -> RankGroup:
    """Rank group for an LP; never more ranks than normal-matrix rows."""
    nranks = max(1, min(cfg.nranks, prob.m))
    if nranks != cfg.nranks:
        log.info("using %d ranks: the normal matrix has only %d rows", nranks, prob.m)
    return RankGroup(nranks, cfg.schedule, cfg.seed)


class _LinearSolver:
    """Holds the rank group and one preconditioner cache per (method, tau)."""

    def __init__(self, prob: LpProblem, cfg: IpmConfig, group: RankGroup | None = None):
        self.cfg = cfg
        self.group = group if group is not None else make_group(prob, cfg)
        self.caches: dict[tuple, PrecondCache] = {}

    def _recipe(self, method: MethodName, tau: float | None) -> Recipe:
        if method == "block_jacobi":
            return Recipe(kind=self.cfg.bj_factor, mc64=False, tau=tau, delta=0.0)
        return Recipe(kind=self.cfg.bbd_factor, mc64=True, tau=tau, delta=self.cfg.delta)

    def _cache(self, method: MethodName, tau: float | None) -> PrecondCache:
        key = (method, tau)
        if key not in self.caches:
            # a new threshold makes the other caches for this method stale
            for k in [k for k in self.caches if k[0] == method]:
                del self.caches[k]
            recipe = self._recipe(method, tau)
            builder = BjBuilder(self.group, recipe) if method == "block_jacobi" else BbdBuilder(self.group, recipe)
            self.caches[key] = PrecondCache(builder)
        return self.caches[key]

    def krylov_cfg(self, method: MethodName) -> KrylovConfig:
        base = self.cfg.solver_cfg
        if method == "block_jacobi":
            iters = self.cfg.bj_max_iters if self.cfg.bj_max_iters is not None else base.max_iters
            return replace(base, method=self.cfg.bj_krylov, max_iters=iters)
        return replace(base, method=self.cfg.bbd_krylov)

    def solve(self, Sr: SparseMatrix, rhs: np.ndarray, method: MethodName, tau: float | None):
        """One attempt; returns (dlam, report or None, precond notes, reuse action)."""
        cache = self._cache(method, tau)
        try:
            M, action = reuse_step(cache, Sr, self.cfg.reuse)
        except (PivotError, ConstructionError, StructuralSingularityError) as err:
            log.info("preconditioner construction failed (%s): %s", method, err)
            cache.invalidate()
            return None, None, {}, "construction_failed"
        op, _ = distributed_operator(self.group, Sr)
        kcfg = self.krylov_cfg(method)
        if kcfg.method == "cg" and op.symmetry == "general":
            kcfg = replace(kcfg, method="gcr")
        dlam, rep = solve_right_preconditioned(op, M.as_preconditioner(), rhs, None, kcfg)
        return dlam, rep, M.notes, action


def ipm_solve(
    prob: LpProblem, cfg: IpmConfig = IpmConfig(), group: RankGroup | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, IpmReport]:
    """Run the interior-point iteration; returns ``(x, lam, s, report)``.

    Pass ``group`` to inspect the message trace afterwards.
    """
    start_method: MethodName = "bbd" if cfg.method == "bbd" else "block_jacobi"
    allow_switch = cfg.method == "auto"
    st = IpmState.initial(prob, start_method)
    solver = _LinearSolver(prob, cfg, group)
    history: list[StepLog] = []
    timing = cfg.timing

    def report(status: IpmStatus) -> IpmReport:
        pres, dres, mu = kkt_measures(prob, st)
        return IpmReport(status, st.step, float(prob.c @ st.x), pres, dres, mu, history)

    for step in range(cfg.max_steps + 1):
        st.step = step
        pres, dres, mu = kkt_measures(prob, st)
        st.mu = mu
        if max(pres, dres, mu) <= cfg.tol_kkt:
            return st.x, st.lam, st.s, report("optimal")
        if step == cfg.max_steps:
            break
        t0 = time.perf_counter()
        Sr, rhs = assemble_normal_system(prob, st, cfg.sigma)
        base_tau = cfg.filter.tau_at(step) if cfg.filter is not None else None

        def attempt(tau):
            if cfg.fault_injector is not None and cfg.fault_injector(step, st.method):
                rep = SolveReport("max_iters", 0, float("inf"), [float("inf")], "injected")
                return None, rep, {}, "injected"
            return solver.solve(Sr, rhs, st.method, tau)

        def record(tau, rep, notes, action, accepted):
            nnz_l = int(notes.get("prepared_lower_nnz", Sr.lower_nnz()))
            full = int(notes.get("unfiltered_lower_nnz", Sr.lower_nnz())) or 1
            history.append(
                StepLog(
                    step, st.method, tau, nnz_l, nnz_l / full,
                    rep.iterations if rep else 0, rep.final_relres if rep else float("inf"),
                    action, accepted, mu, pres, dres, time.perf_counter() - t0 if timing else 0.0,
                )
            )

        while True:
            # a failed solve first relaxes the filter, then falls to the switching rule
            notches = 0
            while True:
                tau = relaxed_tau(base_tau, notches) if base_tau is not None else None
                dlam, rep, notes, action = attempt(tau)
                ok = rep is not None and rep.converged
                record(tau, rep, notes, action, ok)
                if ok or tau is None:
                    break
                notches += 1
                log.info("step %d: solve failed with tau=%g, relaxing the filter", step, tau)
            st, verdict = switching_step(st, rep, allow_switch)
            if verdict != "retry":
                break
            log.info("step %d: switching to bbd", step)
        if verdict == "fail":
            return st.x, st.lam, st.s, report("solver_failure")

        dx, ds = recover_dx(prob, st, dlam, cfg.sigma)
        ap = _max_step(st.x, dx, cfg.step_fraction)
        ad = _max_step(st.s, ds, cfg.step_fraction)
        st.x = st.x + ap * dx
        st.lam = st.lam + ad * dlam
        st.s = st.s + ad * ds
        if not (np.all(st.x > 0) and np.all(st.s > 0)):
            raise ArithmeticError(f"step {step}: iterate left the interior")
        if cfg.on_step is not None:
            cfg.on_step(st)
        log.debug("step %d mu=%.3e pres=%.2e dres=%.2e iters=%d", step, mu, pres, dres, rep.iterations)
    return st.x, st.lam, st.s, report("iteration_limit")


# -- LP text format -----------------------------------------------------------


class LpFormatError(ValueError):
    pass


def read_lp(path) -> LpProblem:
    """Parse the line-oriented LP format (see README)."""
    lines = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))
    if not lines:
        raise LpFormatError(f"{path}: empty LP file")

    def fail(lineno, msg):
        raise LpFormatError(f"{path}:{lineno}: {msg}")

    lineno, head = lines[0]
    try:
        n, m = (int(t) for t in head.split())
    except ValueError:
        fail(lineno, f"header must be 'n m', got {head!r}")
    if n < 1 or m < 0:
        fail(lineno, "need n >= 1 and m >= 0")
    if len(lines) != m + 2:
        fail(lines[-1][0], f"expected {m + 2} data lines (header, objective, {m} constraints), found {len(lines)}")
    lineno, ctext = lines[1]
    try:
        c = np.array([float(t) for t in ctext.split()])
    except ValueError:
        fail(lineno, "objective line must hold n reals")
    if c.size != n:
        fail(lineno, f"objective has {c.size} entries, expected {n}")
    rows, cols, vals, b = [], [], [], np.empty(m)
    for i, (lineno, text) in enumerate(lines[2:]):
        toks = text.split()
        try:
            b[i] = float(toks[0])
            k = int(toks[1])
        except (ValueError, IndexError):
            fail(lineno, "constraint line must start with 'b_i k'")
        if len(toks) != 2 + k:
            fail(lineno, f"declared {k} entries, found {len(toks) - 2}")
        for tok in toks[2:]:
            idx, sep, val = tok.partition(":")
            try:
                j, v = int(idx), float(val)
            except ValueError:
                fail(lineno, f"bad entry {tok!r}, expected idx:val")
            if not sep or not 0 <= j < n:
                fail(lineno, f"entry {tok!r} out of range for n={n}")
            rows.append(i)
            cols.append(j)
            vals.append(v)
    B = SparseMatrix.from_unsorted(
        m, n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals, dtype=np.float64)
    )
    return LpProblem(B, b, c)


def write_lp(prob: LpProblem, path) -> None:
    out = [f"{prob.n} {prob.m}", " ".join(f"{v:.17g}" for v in prob.c)]
    for i in range(prob.m):
        cols, vals = prob.B.row(i)
        entries = " ".join(f"{j}:{v:.17g}" for j, v in zip(cols.tolist(), vals.tolist()))
        out.append(f"{prob.b[i]:.17g} {cols.size} {entries}".rstrip())
    Path(path).write_text("\n".join(out) + "\n")
