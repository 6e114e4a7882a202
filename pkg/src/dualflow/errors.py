"""Shared exception types.

The split mirrors how failures are reported at the CLI: shape and contract
violations are caller bugs, numeric errors are diagnosed aborts, and the
file-format errors name the offending artifact.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, truncated, or from an unknown version."""


class DataError(RuntimeError):
    """A dataset file or manifest entry is malformed."""
