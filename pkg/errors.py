"""
Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI maps it to, so the
command layer never needs a lookup table of its own.
"""


class SSMLabError(Exception):
    """Base class for all errors raised by this package."""
    exit_code = 1


# ═══════════════════════════════════════════════════════════════════════════════
# TENSOR / LAYER CONTRACTS
# ═══════════════════════════════════════════════════════════════════════════════

class ShapeError(SSMLabError, ValueError):
    """Operand shapes do not fit the operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        named = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {named}")


class RangeError(SSMLabError, IndexError):
    """An index, count or axis falls outside its valid range."""


class NumericDomainError(SSMLabError, ArithmeticError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(SSMLabError, RuntimeError):
    """A caller broke an API precondition (non-scalar backward, missing grad, ...)."""


# ═══════════════════════════════════════════════════════════════════════════════
# CLI-FACING ERRORS
# ═══════════════════════════════════════════════════════════════════════════════

class ConfigError(SSMLabError, ValueError):
    """Invalid run configuration; names the offending dotted key."""
    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DatasetError(SSMLabError):
    exit_code = 3


class IdxMagicError(DatasetError):
    pass


class IdxTruncatedError(DatasetError):
    pass


class IdxCountMismatchError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ZeroVarianceError(DatasetError):
    pass


class CheckpointError(SSMLabError):
    """Unreadable, incompatible or wrong-version checkpoint."""
    exit_code = 4
