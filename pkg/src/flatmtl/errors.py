"""Exception hierarchy shared across the package."""


class FlatMTLError(Exception):
    """Base class for all library errors."""


class PartitionError(FlatMTLError, ValueError):
    """A parameter partition does not match the vector it is applied to."""


class NumericalError(FlatMTLError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or update.

    ``dump`` carries a JSON-serializable snapshot of the offending step.
    """

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class SolverError(FlatMTLError, RuntimeError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ConfigError(FlatMTLError, ValueError):
    """Invalid configuration value or unknown key."""


class DataError(FlatMTLError, ValueError):
    """Malformed input data (IDX files, batches, probability tables)."""
