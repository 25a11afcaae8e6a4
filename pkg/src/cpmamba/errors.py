"""Exception types shared across the package."""


class CpmambaError(Exception):
    """Base class for all package errors."""


class ShapeError(CpmambaError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(CpmambaError, ValueError):
    """Invalid configuration value or unknown option."""


class NumericError(CpmambaError, ArithmeticError):
    """A numeric operation left its domain (zero divide, log of <= 0, overflow)."""


class DomainError(CpmambaError, ValueError):
    """Input violates a mathematical precondition (e.g. zero-energy reference)."""


class GraphError(CpmambaError, RuntimeError):
    """Backward pass requested on a tensor not recorded on the active tape."""


class CheckpointError(CpmambaError, RuntimeError):
    """Checkpoint file is corrupt, truncated or incompatible."""


class DataError(CpmambaError, RuntimeError):
    """Dataset file is malformed or does not match the expected layout."""


class TrainingError(CpmambaError, RuntimeError):
    """Training aborted (non-finite loss or inconsistent setup)."""
