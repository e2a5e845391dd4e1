"""Command-line harness for single solves and end-to-end IPM runs.

Exit codes: 0 converged/optimal, 2 solver failure, 1 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConstructionError, IpmSolveError, PivotError, StructuralSingularityError
from .ipm import IpmConfig, LpFormatError, ipm_solve, make_group, read_lp
from .krylov import KrylovConfig, solve_right_preconditioned
from .mmio import read_matrix_market, read_vector
from .precond import FilterConfig, Recipe, ReusePolicy
from .runtime import BbdBuilder, BjBuilder, RankGroup, distributed_operator
from .sparse import spmv

log = logging.getLogger("ipmsolve")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
ORACLE_MAX_N = 500

FACTOR_NAMES = {"ilu0": "ilu0", "lu": "lu_complete", "ic0": "ic0", "cholesky": "cholesky_complete"}
REUSE_NAMES = {"none": "none", "symbolic": "reuse_symbolic", "both": "reuse_both"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ipmsolve", description="Distributed preconditioned Krylov solves and LP interior-point runs.")
    p.add_argument("--mode", choices=("solve", "ipm"), required=True)
    p.add_argument("--matrix", help="Matrix Market file (solve mode)")
    p.add_argument("--rhs", help="right-hand side file; default is A times the ones vector")
    p.add_argument("--lp", help="LP file (ipm mode)")
    p.add_argument("--method", choices=("bj", "bbd", "auto"), default=None,
                   help="bj or bbd; auto (ipm only) starts with bj and switches to bbd on failure")
    p.add_argument("--nranks", "--nblocks", dest="nranks", type=int, default=2)
    p.add_argument("--factor", choices=tuple(FACTOR_NAMES), default=None)
    p.add_argument("--krylov", choices=("cg", "bicgstab", "gcr"), default=None)
    p.add_argument("--restart", type=int, default=30, help="GCR restart length")
    p.add_argument("--scaling", choices=("none", "mc64"), default=None,
                   help="matching/scaling stage (solve mode; bbd in ipm mode always uses it)")
    p.add_argument("--tau", type=float, default=None, help="filter threshold; 0 disables filtering")
    p.add_argument("--tau-schedule", default=None, help="per-step thresholds, e.g. 0:1e-3,24:1e-2")
    p.add_argument("--delta", type=float, default=1e-12)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--bj-max-iters", type=int, default=None, help="iteration cap for block Jacobi solves (ipm)")
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--reuse", choices=tuple(REUSE_NAMES), default="none")
    p.add_argument("--reuse-period", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", choices=("sequential", "shuffled", "threaded"), default="sequential")
    p.add_argument("--output", choices=("table", "csv", "json-lines"), default="table")
    p.add_argument("--trace", metavar="FILE", help="write the message trace here")
    p.add_argument("--oracle", choices=("dense",), default=None)
    p.add_argument("--timing", action="store_true", help="fill the wall-time column")
    return p


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class Column:
    key: str
    title: str
    fmt: str


SOLVE_COLUMNS = (
    Column("method", "method", "{}"),
    Column("nranks", "nranks", "{}"),
    Column("iterations", "iters", "{}"),
    Column("relres", "relres", "{:.3e}"),
    Column("status", "status", "{}"),
    Column("messages", "messages", "{}"),
    Column("seconds", "time(s)", "{:.4f}"),
    Column("oracle_relerr", "oracle_err", "{:.3e}"),
)
IPM_COLUMNS = (
    Column("step", "IPM_step", "{}"),
    Column("method", "method", "{}"),
    Column("tau", "tau", "{:.1e}"),
    Column("nnz_l", "nnz_L", "{}"),
    Column("nnz_ratio", "nnz_L/nnz_L0", "{:.1%}"),
    Column("iterations", "krylov_iters", "{}"),
    Column("relres", "relres", "{:.3e}"),
    Column("reuse", "reuse", "{}"),
    Column("seconds", "time(s)", "{:.4f}"),
)


def _cell(col: Column, value) -> str:
    if value is None:
        return "-"
    return col.fmt.format(value)


def _columns_for(kind: str, rows: list[dict]) -> tuple[Column, ...]:
    cols = SOLVE_COLUMNS if kind == "solve" else IPM_COLUMNS
    return tuple(c for c in cols if any(c.key in r for r in rows))


def render_table(kind: str, rows: list[dict], summary: dict) -> str:
    cols = _columns_for(kind, rows)
    cells = [[c.title for c in cols]] + [[_cell(c, r.get(c.key)) for c in cols] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(cols))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.append(" ".join(f"{k}={_summary_value(v)}" for k, v in summary.items() if k != "type"))
    return "\n".join(lines) + "\n"


def _summary_value(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def render_csv(kind: str, rows: list[dict], summary: dict) -> str:
    cols = _columns_for(kind, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([c.key for c in cols])
    for r in rows:
        w.writerow(["" if r.get(c.key) is None else repr(r[c.key]) if isinstance(r[c.key], float) else r[c.key] for c in cols])
    w.writerow(["#summary"] + [f"{k}={_summary_value(v)}" for k, v in summary.items() if k != "type"])
    return buf.getvalue()


def render_json_lines(kind: str, rows: list[dict], summary: dict) -> str:
    out = [json.dumps({"type": kind, **r}) for r in rows]
    out.append(json.dumps({"type": "summary", "kind": kind, **summary}))
    return "\n".join(out) + "\n"


def parse_json_lines(text: str) -> tuple[str, list[dict], dict]:
    """Inverse of :func:`render_json_lines`: ``(kind, rows, summary)``."""
    rows, summary, kind = [], {}, "solve"
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        t = rec.pop("type")
        if t == "summary":
            kind = rec.pop("kind")
            summary = rec
        else:
            rows.append(rec)
    return kind, rows, summary


def render(fmt: str, kind: str, rows: list[dict], summary: dict) -> str:
    if fmt == "json-lines":
        return render_json_lines(kind, rows, summary)
    if fmt == "csv":
        return render_csv(kind, rows, summary)
    return render_table(kind, rows, summary)


# -- modes --------------------------------------------------------------------


def _tau(args, mode_default: float | None) -> float | None:
    tau = mode_default if args.tau is None else args.tau
    return tau if tau else None


def _filter_config(args, mode_default) -> FilterConfig | None:
    tau = _tau(args, mode_default)
    if args.tau_schedule:
        return FilterConfig.parse_schedule(args.tau_schedule, tau if tau else 1e-3)
    return FilterConfig(tau) if tau else None


def run_solve(args) -> tuple[int, list[dict], dict, RankGroup | None]:
    if not args.matrix:
        raise UsageError("--matrix is required in solve mode")
    method = args.method or "bbd"
    if method == "auto":
        raise UsageError("--method auto needs the IPM step loop; use it with --mode ipm")
    for flag in ("lp", "tau_schedule", "bj_max_iters"):
        if getattr(args, flag) is not None:
            raise UsageError(f"--{flag.replace('_', '-')} is only meaningful in ipm mode")
    A = read_matrix_market(args.matrix)
    if not A.is_square:
        raise UsageError(f"matrix is {A.nrows}x{A.ncols}; a square system is required")
    b = read_vector(args.rhs) if args.rhs else spmv(A, np.ones(A.ncols))
    if b.shape != (A.nrows,):
        raise UsageError(f"rhs has {b.size} entries, matrix has {A.nrows} rows")
    if args.nranks > A.nrows:
        raise UsageError(f"--nranks {args.nranks} exceeds the matrix dimension {A.nrows}")
    kind = FACTOR_NAMES[args.factor or "lu"]
    if method == "bbd" and kind not in ("ilu0", "lu_complete"):
        raise UsageError("bbd supports --factor ilu0 or lu")
    krylov = args.krylov or "gcr"
    if krylov == "cg" and A.symmetry == "general":
        raise UsageError("--krylov cg needs a symmetric matrix file")
    recipe = Recipe(kind=kind, mc64=(args.scaling == "mc64"), tau=_tau(args, None), delta=args.delta)
    g = RankGroup(args.nranks, args.schedule, args.seed)
    t0 = time.perf_counter()
    builder = BjBuilder(g, recipe) if method == "bj" else BbdBuilder(g, recipe)
    row = {"method": method, "nranks": args.nranks}
    try:
        _, M = builder.build(A)
    except (PivotError, ConstructionError, StructuralSingularityError) as err:
        log.error("preconditioner construction failed: %s", err)
        row.update(iterations=0, relres=None, status="construction_failed", messages=g.count())
        return EXIT_FAILURE, [row], {"status": "solver_failure"}, g
    op, _ = distributed_operator(g, A)
    cfg = KrylovConfig(krylov, args.restart, args.tol, args.max_iters)
    x, rep = solve_right_preconditioned(op, M.as_preconditioner(), b, None, cfg)
    elapsed = time.perf_counter() - t0
    row.update(iterations=rep.iterations, relres=rep.final_relres, status=rep.status, messages=g.count())
    if args.timing:
        row["seconds"] = elapsed
    if args.oracle == "dense":
        if A.nrows > ORACLE_MAX_N:
            raise UsageError(f"--oracle dense is limited to n <= {ORACLE_MAX_N}")
        ref = np.linalg.solve(A.to_dense(), b)
        row["oracle_relerr"] = float(np.linalg.norm(x - ref) / max(np.linalg.norm(ref), 1e-300))
    status = "converged" if rep.converged else "solver_failure"
    return (EXIT_OK if rep.converged else EXIT_FAILURE), [row], {"status": status}, g


def run_ipm(args) -> tuple[int, list[dict], dict, RankGroup | None]:
    if not args.lp:
        raise UsageError("--lp is required in ipm mode")
    if args.matrix or args.rhs or args.oracle or args.scaling:
        raise UsageError("--matrix, --rhs, --oracle and --scaling belong to solve mode")
    prob = read_lp(args.lp)
    factor = FACTOR_NAMES[args.factor] if args.factor else None
    if factor not in (None, "ilu0", "lu_complete"):
        raise UsageError("ipm mode supports --factor ilu0 or lu")
    krylov = {}
    if args.krylov:
        krylov = {"bj_krylov": args.krylov, "bbd_krylov": args.krylov}
    factors = {}
    if factor:
        factors = {"bj_factor": factor, "bbd_factor": factor}
    cfg = IpmConfig(
        tol_kkt=args.tol,
        max_steps=args.max_steps,
        solver_cfg=KrylovConfig("gcr", args.restart, args.tol, args.max_iters),
        method=args.method or "auto",
        bj_max_iters=args.bj_max_iters,
        filter=_filter_config(args, 1e-3),
        delta=args.delta,
        reuse=ReusePolicy(REUSE_NAMES[args.reuse], args.reuse_period),
        nranks=args.nranks,
        schedule=args.schedule,
        seed=args.seed,
        timing=args.timing,
        **krylov,
        **factors,
    )
    group = make_group(prob, cfg)
    x, lam, s, rep = ipm_solve(prob, cfg, group)
    short = {"block_jacobi": "bj", "bbd": "bbd"}
    rows = []
    for e in rep.log:
        row = {
            "step": e.step,
            "method": short[e.method],
            "tau": e.tau,
            "nnz_l": e.nnz_l,
            "nnz_ratio": e.nnz_ratio,
            "iterations": e.iterations,
            "relres": e.relres,
            "reuse": e.reuse,
        }
        if args.timing:
            row["seconds"] = e.seconds
        rows.append(row)
    summary = {"status": rep.status, "objective": rep.objective, "steps": rep.steps}
    return (EXIT_OK if rep.status == "optimal" else EXIT_FAILURE), rows, summary, group


def _origin(err: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    tb, where = err.__traceback__, "cli"
    while tb is not None:
        path = tb.tb_frame.f_code.co_filename
        if os.sep + "ipmsolve" + os.sep in path:
            where = os.path.splitext(os.path.basename(path))[0]
        tb = tb.tb_next
    return where


def _configure_logging() -> None:
    level = os.environ.get("SDSL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None, stdout=None) -> int:
    _configure_logging()
    out = stdout or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        if args.nranks < 1:
            raise UsageError("--nranks must be at least 1")
        runner = run_solve if args.mode == "solve" else run_ipm
        code, rows, summary, group = runner(args)
    except UsageError as err:
        print(f"ipmsolve: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, LpFormatError, IpmSolveError, ValueError) as err:
        where = _origin(err)
        print(f"ipmsolve: error [{where}]: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.trace and group is not None:
        group.dump_trace(args.trace)
    out.write(render(args.output, args.mode, rows, summary))
    return code


if __name__ == "__main__":
    sys.exit(main())
