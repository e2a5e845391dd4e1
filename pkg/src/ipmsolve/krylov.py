"""Right-preconditioned Krylov solvers: CG, BiCGSTAB and restarted GCR(m).

All three solve ``A M^{-1} y = b`` and return ``x = M^{-1} y`` directly.
Convergence is judged on the true residual ``||b - A x|| / ||b||``, which is
recomputed every iteration; the recursive residual is only used to drive the
recurrences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import DimensionError
from .sparse import SparseMatrix, SymmetryTag, spmv

Status = Literal["converged", "max_iters", "breakdown", "nonfinite"]
Method = Literal["cg", "bicgstab", "gcr"]

# |rho| below this ends BiCGSTAB with a breakdown
PIVOT_GUARD = 1e-300


@dataclass(frozen=True)
class LinearOperator:
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    symmetry: SymmetryTag = "general"

    @classmethod
    def from_matrix(cls, A: SparseMatrix) -> "LinearOperator":
        if not A.is_square:
            raise DimensionError(f"operator must be square, got {A.shape}")
        return cls(A.nrows, lambda x: spmv(A, x), A.symmetry)


@dataclass(frozen=True)
class Preconditioner:
    dim: int
    apply_inverse: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def identity(cls, dim: int) -> "Preconditioner":
        return cls(dim, lambda r: np.array(r, dtype=np.float64))


@dataclass(frozen=True)
class KrylovConfig:
    method: Method = "gcr"
    restart_m: int = 30
    rel_tol: float = 1e-8
    max_iters: int = 1000

    def __post_init__(self):
        if self.method not in ("cg", "bicgstab", "gcr"):
            raise ValueError(f"unknown Krylov method {self.method!r}")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.restart_m < 1:
            raise ValueError("restart_m must be at least 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class SolveReport:
    status: Status
    iterations: int
    final_relres: float
    residual_history: list[float] = field(default_factory=list)
    method: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"


class _Monitor:
    """Tracks the true relative residual and the report fields."""

    def __init__(self, op: LinearOperator, b: np.ndarray, rel_tol: float, method: str):
        self.op = op
        self.b = b
        self.bnorm = float(np.linalg.norm(b))
        self.rel_tol = rel_tol
        self.method = method
        self.history: list[float] = []

    def relres(self, x: np.ndarray) -> float:
        r = self.b - self.op.apply(x)
        return float(np.linalg.norm(r)) / self.bnorm

    def record(self, x: np.ndarray) -> float:
        rr = self.relres(x)
        self.history.append(rr)
        return rr

    def report(self, status: Status) -> SolveReport:
        return SolveReport(
            status=status,
            iterations=len(self.history) - 1,
            final_relres=self.history[-1],
            residual_history=self.history,
            method=self.method,
        )


def _prepare(op, M, b, x0):
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (op.dim,):
        raise DimensionError(f"rhs has shape {b.shape}, operator dimension is {op.dim}")
    if M is None:
        M = Preconditioner.identity(op.dim)
    elif M.dim != op.dim:
        raise DimensionError(f"preconditioner dimension {M.dim} != operator dimension {op.dim}")
    if not np.all(np.isfinite(b)):
        raise ValueError("rhs contains non-finite entries")
    x = np.zeros(op.dim) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (op.dim,):
        raise DimensionError(f"x0 has shape {x.shape}, operator dimension is {op.dim}")
    return M, b, x


def _zero_rhs(op: LinearOperator, method: str):
    return np.zeros(op.dim), SolveReport("converged", 0, 0.0, [0.0], method)


def cg(
    op: LinearOperator,
    M: Preconditioner | None,
    b,
    x0=None,
    rel_tol: float = 1e-8,
    max_iters: int = 1000,
) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients for symmetric positive definite A.

    The iterates coincide with right-preconditioned CG carried out in the
    M^{-1} inner product, so a symmetric positive definite M is required.
    """
    if op.symmetry == "general":
        raise ValueError("CG requires an operator tagged symmetric or spd-claimed")
    M, b, x = _prepare(op, M, b, x0)
    mon = _Monitor(op, b, rel_tol, "cg")
    if mon.bnorm == 0.0:
        return _zero_rhs(op, "cg")
    r = b - op.apply(x)
    mon.history.append(float(np.linalg.norm(r)) / mon.bnorm)
    if mon.history[-1] <= rel_tol:
        return x, mon.report("converged")
    z = M.apply_inverse(r)
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iters):
        q = op.apply(p)
        pq = float(p @ q)
        if abs(pq) < PIVOT_GUARD or abs(rz) < PIVOT_GUARD:
            return x, mon.report("breakdown")
        alpha = rz / pq
        x = x + alpha * p
        r = r - alpha * q
        rr = mon.record(x)
        if not np.all(np.isfinite(x)):
            return x, mon.report("nonfinite")
        if rr <= rel_tol:
            return x, mon.report("converged")
        z = M.apply_inverse(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, mon.report("max_iters")


def bicgstab(
    op: LinearOperator,
    M: Preconditioner | None,
    b,
    x0=None,
    rel_tol: float = 1e-8,
    max_iters: int = 1000,
) -> tuple[np.ndarray, SolveReport]:
    """Right-preconditioned BiCGSTAB (van der Vorst, 1992)."""
    M, b, x = _prepare(op, M, b, x0)
    mon = _Monitor(op, b, rel_tol, "bicgstab")
    if mon.bnorm == 0.0:
        return _zero_rhs(op, "bicgstab")
    r = b - op.apply(x)
    mon.history.append(float(np.linalg.norm(r)) / mon.bnorm)
    if mon.history[-1] <= rel_tol:
        return x, mon.report("converged")
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    for _ in range(max_iters):
        rho_new = float(r_hat @ r)
        if abs(rho_new) < PIVOT_GUARD:
            return x, mon.report("breakdown")
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = M.apply_inverse(p)
        v = op.apply(p_hat)
        rv = float(r_hat @ v)
        if abs(rv) < PIVOT_GUARD:
            return x, mon.report("breakdown")
        alpha = rho_new / rv
        s = r - alpha * v
        x_half = x + alpha * p_hat
        if mon.relres(x_half) <= rel_tol:
            x = x_half
            mon.record(x)
            return x, mon.report("converged")
        s_hat = M.apply_inverse(s)
        t = op.apply(s_hat)
        tt = float(t @ t)
        if tt < PIVOT_GUARD:
            return x_half, mon.report("breakdown")
        omega = float(t @ s) / tt
        x = x_half + omega * s_hat
        r = s - omega * t
        rr = mon.record(x)
        if not np.all(np.isfinite(x)):
            return x, mon.report("nonfinite")
        if rr <= rel_tol:
            return x, mon.report("converged")
        if abs(omega) < PIVOT_GUARD:
            return x, mon.report("breakdown")
        rho = rho_new
    return x, mon.report("max_iters")


def gcr_restarted(
    op: LinearOperator,
    M: Preconditioner | None,
    b,
    x0=None,
    m: int = 30,
    rel_tol: float = 1e-8,
    max_iters: int = 1000,
) -> tuple[np.ndarray, SolveReport]:
    """Right-preconditioned GCR(m).

    Each iteration adds the direction p = M^{-1} r, orthogonalizes A p
    against the stored images (modified Gram-Schmidt) and minimizes the
    residual over the span.  After ``m`` directions the basis is dropped.
    """
    if m < 1:
        raise ValueError("restart length m must be at least 1")
    M, b, x = _prepare(op, M, b, x0)
    mon = _Monitor(op, b, rel_tol, "gcr")
    if mon.bnorm == 0.0:
        return _zero_rhs(op, "gcr")
    r = b - op.apply(x)
    mon.history.append(float(np.linalg.norm(r)) / mon.bnorm)
    if mon.history[-1] <= rel_tol:
        return x, mon.report("converged")
    P: list[np.ndarray] = []
    Q: list[np.ndarray] = []
    for _ in range(max_iters):
        if len(P) == m:
            P.clear()
            Q.clear()
        p = M.apply_inverse(r)
        q = op.apply(p)
        for pi, qi in zip(P, Q):
            beta = float(q @ qi)
            q = q - beta * qi
            p = p - beta * pi
        qnorm = float(np.linalg.norm(q))
        if not np.isfinite(qnorm):
            return x, mon.report("nonfinite")
        if qnorm == 0.0:
            return x, mon.report("breakdown")
        q = q / qnorm
        p = p / qnorm
        alpha = float(r @ q)
        x = x + alpha * p
        r = r - alpha * q
        P.append(p)
        Q.append(q)
        rr = mon.record(x)
        if not np.all(np.isfinite(x)):
            return x, mon.report("nonfinite")
        if rr <= rel_tol:
            return x, mon.report("converged")
    return x, mon.report("max_iters")


def solve_right_preconditioned(
    op: LinearOperator,
    M: Preconditioner | None,
    b,
    x0=None,
    cfg: KrylovConfig = KrylovConfig(),
) -> tuple[np.ndarray, SolveReport]:
    if cfg.method == "cg":
        return cg(op, M, b, x0, cfg.rel_tol, cfg.max_iters)
    if cfg.method == "bicgstab":
        return bicgstab(op, M, b, x0, cfg.rel_tol, cfg.max_iters)
    return gcr_restarted(op, M, b, x0, cfg.restart_m, cfg.rel_tol, cfg.max_iters)
