"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage errors exit 1,
data/shape errors exit 2, numerical failures exit 3.
"""


class PetunmixError(Exception):
    """Base class for all package errors."""


class ShapeError(PetunmixError, ValueError):
    """Dimension mismatch, naming the offending operand."""

    def __init__(self, operand, message):
        self.operand = operand
        super().__init__(f"{operand}: {message}")


class DataError(PetunmixError, ValueError):
    """Invalid or inconsistent input data (files, configs, degenerate inputs)."""


class NumericalError(PetunmixError, ArithmeticError):
    """Non-finite values or other numerical breakdown during computation."""


class UsageError(PetunmixError, ValueError):
    """Invalid command-line usage or configuration keys."""
