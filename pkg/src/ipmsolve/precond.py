"""Preconditioner construction: sparse filtering, matching/scaling, diagonal
correction, and reuse of factorizations across a sequence of matrices.

A :class:`Recipe` names the stages; :func:`prepare_matrix` turns a matrix into
the one that actually gets factored, and :class:`MonolithicBuilder` factors it
as a single :class:`~ipmsolve.factor.FactorBundle`.  The distributed builders
in :mod:`ipmsolve.runtime` reuse :func:`prepare_matrix` unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal, Protocol

import numpy as np

from .errors import ConstructionError, PatternMismatchError, PivotError
from .factor import (
    FactorBundle,
    FactorKind,
    cholesky_complete,
    factorize,
    lu_complete,
    numeric,
    symbolic,
)
from .matching import ScalingResult, mc64_match_scale
from .sparse import SparseMatrix

log = logging.getLogger(__name__)

ReuseMode = Literal["none", "reuse_symbolic", "reuse_both"]
ReuseAction = Literal["reused_both", "refactored_numeric", "rebuilt_all"]

# each relaxation notch divides tau by this factor
RELAX_FACTOR = 1e-2
MAX_RELAX_NOTCHES = 2


# -- filtering ------------------------------------------------------------------


def sparse_filter(A: SparseMatrix, tau: float) -> SparseMatrix:
    """Drop off-diagonal a_ij when |a_ij| < tau|a_ii| and |a_ij| < tau|a_jj|.

    Diagonal entries always stay; a structurally missing diagonal counts as
    zero, which makes both conditions false for its row/column.
    """
    if not A.is_square:
        raise ValueError(f"sparse_filter: matrix must be square, got {A.shape}")
    if tau < 0 or not np.isfinite(tau):
        raise ValueError("sparse_filter: tau must be finite and nonnegative")
    d = np.abs(A.diagonal())
    rows, cols = A.row_ids, A.col_indices
    mag = np.abs(A.values)
    drop = (rows != cols) & (mag < tau * d[rows]) & (mag < tau * d[cols])
    keep = ~drop
    out = SparseMatrix.from_unsorted(A.nrows, A.ncols, rows[keep], cols[keep], A.values[keep])
    if A.symmetry != "general":
        out = out.with_symmetry(A.symmetry)
    return out


@dataclass(frozen=True)
class FilterConfig:
    """Filtering threshold with an optional per-IPM-step schedule.

    ``schedule`` holds ``(first_step, tau)`` pairs; the last pair whose
    ``first_step`` has been reached overrides ``tau``.
    """

    tau: float = 1e-3
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        steps = [s for s, _ in self.schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule thresholds must be strictly increasing")
        if any(t <= 0 for _, t in self.schedule):
            raise ValueError("scheduled tau values must be positive")

    def tau_at(self, step: int) -> float:
        tau = self.tau
        for first, t in self.schedule:
            if step >= first:
                tau = t
        return tau

    @classmethod
    def parse_schedule(cls, text: str, tau: float = 1e-3) -> "FilterConfig":
        """Parse ``"0:1e-3,24:1e-2"``."""
        pairs = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            step, _, value = item.partition(":")
            pairs.append((int(step), float(value)))
        return cls(tau, tuple(pairs))


def relaxed_tau(tau: float | None, notches: int) -> float | None:
    """Threshold after ``notches`` relaxations; ``None`` once filtering is off."""
    if tau is None or notches >= MAX_RELAX_NOTCHES:
        return None
    return tau * RELAX_FACTOR**notches


def build_filtered_preconditioner(A: SparseMatrix, tau: float) -> FactorBundle:
    """Complete Cholesky of the filtered matrix, LU if a pivot is not positive."""
    if A.symmetry == "general":
        raise ValueError("build_filtered_preconditioner: matrix must be tagged symmetric")
    Af = sparse_filter(A, tau)
    try:
        F = cholesky_complete(Af)
    except PivotError as chol_err:
        log.info("filtered Cholesky failed at row %d, falling back to LU", chol_err.row)
        try:
            F = lu_complete(Af)
        except PivotError as lu_err:
            raise ConstructionError(
                f"filtered preconditioner: Cholesky ({chol_err}) and LU ({lu_err}) both failed"
            ) from lu_err
        F = F.with_transform(fallback="lu_complete")
    return F.with_transform(tau=tau, filtered_nnz=Af.nnz, filtered_lower_nnz=Af.lower_nnz())


# -- diagonal correction --------------------------------------------------------


@dataclass(frozen=True)
class CorrectionConfig:
    delta: float = 1e-12

    def __post_init__(self):
        if not (self.delta > 0 and np.isfinite(self.delta)):
            raise ValueError("delta must be finite and positive")


def diagonal_correction(P: SparseMatrix, delta: float) -> SparseMatrix:
    """p_ii <- p_ii + delta * sign(p_ii), with sign(0) = +1.

    Missing diagonal entries are inserted and become ``+delta``.
    """
    if not P.is_square:
        raise ValueError(f"diagonal_correction: matrix must be square, got {P.shape}")
    if delta < 0 or not np.isfinite(delta):
        raise ValueError("diagonal_correction: delta must be finite and nonnegative")
    n = P.nrows
    d = P.diagonal()
    sign = np.where(d < 0, -1.0, 1.0)
    newdiag = d + delta * sign
    rows, cols, vals = P.row_ids, P.col_indices, P.values
    off = rows != cols
    out = SparseMatrix.from_unsorted(
        n,
        n,
        np.concatenate([rows[off], np.arange(n)]),
        np.concatenate([cols[off], np.arange(n)]),
        np.concatenate([vals[off], newdiag]),
    )
    if P.symmetry != "general":
        out = out.with_symmetry(P.symmetry)
    return out


# -- the full pipeline --------------------------------------------------------


@dataclass(frozen=True)
class Recipe:
    """Stages applied before factoring: matching/scaling, filter, correction.

    With ``mc64`` the row permutation makes the prepared matrix unsymmetric,
    so Cholesky kinds are only meaningful without it.
    """

    kind: FactorKind = "lu_complete"
    mc64: bool = False
    tau: float | None = None
    delta: float = 0.0

    def __post_init__(self):
        if self.mc64 and self.kind in ("ic0", "cholesky_complete"):
            raise ValueError("a row-permuting matching cannot feed a Cholesky-type factorization")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def with_tau(self, tau: float | None) -> "Recipe":
        return Recipe(self.kind, self.mc64, tau, self.delta)


@dataclass(frozen=True, eq=False)
class Prepared:
    """The matrix to factor and the transforms relating it to the input."""

    matrix: SparseMatrix
    scaling: ScalingResult | None
    unfiltered_lower_nnz: int

    @property
    def transforms(self) -> dict:
        if self.scaling is None:
            return {}
        return {
            "row_perm": self.scaling.row_perm,
            "row_scale": self.scaling.row_scale,
            "col_scale": self.scaling.col_scale,
        }

    def rhs_in(self, b: np.ndarray) -> np.ndarray:
        """Map a residual into the prepared matrix's row space."""
        if self.scaling is None:
            return b
        return b[self.scaling.row_perm] * self.scaling.row_scale

    def sol_out(self, y: np.ndarray) -> np.ndarray:
        """Map a prepared-space solution back to the original unknowns."""
        if self.scaling is None:
            return y
        return y * self.scaling.col_scale


def prepare_matrix(A: SparseMatrix, recipe: Recipe, scaling: ScalingResult | None = None) -> Prepared:
    """Run matching/scaling, filtering and correction on A.

    Passing a previous ``scaling`` reuses its permutation and scale factors
    (the reuse path) instead of recomputing the matching.
    """
    if recipe.mc64:
        if scaling is None:
            scaling = mc64_match_scale(A)
            P = scaling.scaled_matrix
        else:
            P = A.permute(row_perm=scaling.row_perm).scale(scaling.row_scale, scaling.col_scale)
    else:
        scaling = None
        P = A
    unfiltered = P.lower_nnz()
    if recipe.tau:
        P = sparse_filter(P, recipe.tau)
    if recipe.delta:
        P = diagonal_correction(P, recipe.delta)
    return Prepared(P, scaling, unfiltered)


def _factor_prepared(prep: Prepared, kind: FactorKind, sym=None) -> tuple[Any, FactorBundle]:
    P = prep.matrix
    if kind == "cholesky_complete":
        # Cholesky of the filtered matrix, LU when a pivot is not positive
        try:
            if sym is None:
                sym = symbolic(P, kind)
            return sym, numeric(P, sym, kind)
        except PivotError as err:
            log.info("Cholesky failed at row %d, falling back to LU", err.row)
            try:
                F = numeric(P, sym, "lu_complete")
            except PivotError as lu_err:
                raise ConstructionError(f"Cholesky ({err}) and LU ({lu_err}) both failed") from lu_err
            return sym, F.with_transform(fallback="lu_complete")
    if sym is None:
        sym = symbolic(P, kind)
    return sym, numeric(P, sym, kind)


def build_corrected_preconditioner(
    A: SparseMatrix,
    filter: FilterConfig | float | None = None,
    delta: float = 1e-12,
    scale: bool = True,
    kind: FactorKind = "lu_complete",
) -> FactorBundle:
    """Matching/scaling, optional filter, diagonal correction, then factor.

    The returned bundle carries the row permutation and both scalings, so
    :meth:`FactorBundle.solve` works on unpermuted, unscaled vectors.
    """
    tau = filter.tau if isinstance(filter, FilterConfig) else filter
    recipe = Recipe(kind=kind, mc64=scale, tau=tau, delta=delta)
    return MonolithicBuilder(recipe).build(A)[1]


# -- builders and reuse -------------------------------------------------------


class Builder(Protocol):
    """Anything that can split preconditioner construction in two phases."""

    def symbolic(self, A: SparseMatrix) -> Any: ...

    def numeric(self, A: SparseMatrix, state: Any) -> Any: ...


@dataclass
class MonolithicBuilder:
    """Single-matrix preconditioner following a :class:`Recipe`.

    The symbolic state holds the matching/scaling and the fill analysis, so
    a numeric refresh redoes only filtering, correction and numeric
    factorization.
    """

    recipe: Recipe = field(default_factory=Recipe)

    def symbolic(self, A: SparseMatrix) -> dict:
        prep = prepare_matrix(A, self.recipe)
        sym = symbolic(prep.matrix, self.recipe.kind)
        return {"scaling": prep.scaling, "sym": sym}

    def numeric(self, A: SparseMatrix, state: dict) -> FactorBundle:
        prep = prepare_matrix(A, self.recipe, state["scaling"])
        _, F = _factor_prepared(prep, self.recipe.kind, state["sym"])
        return self._finish(prep, F)

    def build(self, A: SparseMatrix) -> tuple[dict, FactorBundle]:
        prep = prepare_matrix(A, self.recipe)
        sym, F = _factor_prepared(prep, self.recipe.kind)
        return {"scaling": prep.scaling, "sym": sym}, self._finish(prep, F)

    def _finish(self, prep: Prepared, F: FactorBundle) -> FactorBundle:
        return F.with_transform(
            **prep.transforms,
            prepared_lower_nnz=prep.matrix.lower_nnz(),
            unfiltered_lower_nnz=prep.unfiltered_lower_nnz,
        )


@dataclass(frozen=True)
class ReusePolicy:
    """How long factorizations survive across a matrix sequence.

    ``reuse_both`` hands back the same numeric factors for up to
    ``numeric_refresh_period`` steps after they were computed, then refactors;
    ``reuse_symbolic`` refactors every step.  Independently, the symbolic
    state is discarded once it is ``stale_iteration_cap`` steps old.
    """

    mode: ReuseMode = "none"
    numeric_refresh_period: int = 1
    stale_iteration_cap: int = 1_000_000

    def __post_init__(self):
        if self.mode not in ("none", "reuse_symbolic", "reuse_both"):
            raise ValueError(f"unknown reuse mode {self.mode!r}")
        if self.numeric_refresh_period < 1:
            raise ValueError("numeric_refresh_period must be at least 1")
        if self.stale_iteration_cap < 1:
            raise ValueError("stale_iteration_cap must be at least 1")


@dataclass
class PrecondCache:
    builder: Any
    last_pattern_hash: str | None = None
    symbolic_state: Any = None
    numeric_bundle: Any = None
    age_steps: int = 0
    symbolic_age: int = 0

    def invalidate(self) -> None:
        self.last_pattern_hash = None
        self.symbolic_state = None
        self.numeric_bundle = None
        self.age_steps = 0
        self.symbolic_age = 0


def _rebuild(cache: PrecondCache, A: SparseMatrix) -> tuple[Any, ReuseAction]:
    build = getattr(cache.builder, "build", None)
    if build is not None:
        state, bundle = build(A)
    else:
        state = cache.builder.symbolic(A)
        bundle = cache.builder.numeric(A, state)
    cache.last_pattern_hash = A.pattern_hash()
    cache.symbolic_state = state
    cache.numeric_bundle = bundle
    cache.age_steps = 0
    cache.symbolic_age = 0
    return bundle, "rebuilt_all"


def reuse_step(cache: PrecondCache, A_new: SparseMatrix, policy: ReusePolicy) -> tuple[Any, ReuseAction]:
    """Return a preconditioner for ``A_new`` and the action taken."""
    if (
        cache.numeric_bundle is None
        or policy.mode == "none"
        or A_new.pattern_hash() != cache.last_pattern_hash
        or cache.symbolic_age >= policy.stale_iteration_cap
    ):
        return _rebuild(cache, A_new)
    if policy.mode == "reuse_both" and cache.age_steps < policy.numeric_refresh_period:
        cache.age_steps += 1
        cache.symbolic_age += 1
        return cache.numeric_bundle, "reused_both"
    try:
        bundle = cache.builder.numeric(A_new, cache.symbolic_state)
    except (PatternMismatchError, PivotError, ConstructionError) as err:
        log.info("numeric refresh failed (%s); rebuilding", err)
        return _rebuild(cache, A_new)
    cache.numeric_bundle = bundle
    cache.age_steps = 0
    cache.symbolic_age += 1
    return bundle, "refactored_numeric"


def plain_builder(kind: FactorKind = "lu_complete") -> MonolithicBuilder:
    return MonolithicBuilder(Recipe(kind=kind))


__all__ = [
    "CorrectionConfig",
    "FilterConfig",
    "MonolithicBuilder",
    "PrecondCache",
    "Prepared",
    "Recipe",
    "ReusePolicy",
    "build_corrected_preconditioner",
    "build_filtered_preconditioner",
    "diagonal_correction",
    "factorize",
    "plain_builder",
    "prepare_matrix",
    "relaxed_tau",
    "reuse_step",
    "sparse_filter",
]
