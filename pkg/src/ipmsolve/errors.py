"""Exception hierarchy shared by every subpackage."""

from __future__ import annotations


class IpmSolveError(Exception):
    """Base class for all library errors."""


class DimensionError(IpmSolveError, ValueError):
    """Operand shapes do not agree."""


class InvalidMatrixError(IpmSolveError, ValueError):
    """A CSR invariant is violated."""


class MatrixMarketError(IpmSolveError, ValueError):
    """A Matrix Market or LP text file could not be parsed."""


class PivotError(IpmSolveError, ArithmeticError):
    """A factorization met a zero, tiny or (for Cholesky) nonpositive pivot.

    ``row`` is the pivot row in the factorized ordering and ``block`` the
    block/rank id when the failure happened inside a decomposition.
    """

    def __init__(self, message: str, row: int, block: int | None = None):
        super().__init__(message)
        self.row = row
        self.block = block

    def with_block(self, block: int) -> "PivotError":
        err = PivotError(f"block {block}: {self}", self.row, block)
        err.__cause__ = self
        return err


class StructuralSingularityError(IpmSolveError, ArithmeticError):
    """No perfect matching exists on the nonzero pattern."""


class PatternMismatchError(IpmSolveError, ValueError):
    """A numeric refactorization received entries outside the symbolic pattern."""


class ConstructionError(IpmSolveError, RuntimeError):
    """Every preconditioner construction route failed."""


class DeadlockError(IpmSolveError, RuntimeError):
    """A simulated rank waited on a message that was never sent."""
