"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf.

    ``op`` names the operation that produced the first non-finite value.
    """

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by op '{op}'")


class DeterminismError(RuntimeError):
    """A function that must be deterministic returned different values on replay."""


class ConfigError(ValueError):
    """Invalid model, fusion, freeze or run configuration."""


class DataError(ValueError):
    """Input data cannot satisfy an operation's requirements."""
