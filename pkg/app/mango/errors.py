"""
errors.py

Exception hierarchy shared by every module. Each error also subclasses the
closest built-in so callers that only know about ValueError or
ArithmeticError keep working.
"""


class MangoError(Exception):
    """Root of all errors raised by this package."""


class DimensionError(MangoError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        named = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {named}")


class ContractError(MangoError, ValueError):
    """A call contract was violated by the caller."""


class PartitionError(MangoError, ValueError):
    """The two partitions handed to a cross-attention layer differ in shape."""


class LayoutError(MangoError, ValueError):
    """Token counts cannot be split the way the partition scheme needs."""


class InputError(MangoError, ValueError):
    """Input values are unusable (non-finite, empty, out of range)."""


class SingularityError(MangoError, ArithmeticError):
    """A triangular factor has a vanishing diagonal entry."""


class NumericError(MangoError, ArithmeticError):
    """A non-finite value appeared inside a flow stack."""

    def __init__(self, message: str, block_index: int | None = None):
        self.block_index = block_index
        super().__init__(message)


class InvertibilityError(MangoError, AssertionError):
    """The periodic round-trip check exceeded its tolerance."""

    def __init__(self, step: int, error: float, tolerance: float):
        self.step = step
        self.error = error
        self.tolerance = tolerance
        super().__init__(f"round-trip error {error:.3e} >= {tolerance:.1e} at step {step}")


class TrainingDivergedError(MangoError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, last_metrics: dict | None):
        self.step = step
        self.last_metrics = last_metrics
        super().__init__(f"non-finite loss at step {step}; last finite metrics: {last_metrics}")


class OracleError(MangoError, ArithmeticError):
    """A brute-force oracle evaluated a non-finite value."""

    def __init__(self, message: str, coordinate: int | None = None):
        self.coordinate = coordinate
        super().__init__(message)


class FormatError(MangoError, ValueError):
    """A container file is malformed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ConfigError(MangoError, ValueError):
    """A configuration document is invalid."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message}")


class ConfigMismatchError(ConfigError):
    """A stored configuration disagrees with the one the caller expects."""
