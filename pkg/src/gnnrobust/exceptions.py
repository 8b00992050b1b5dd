"""Exception hierarchy shared across the package."""


class GNNRobustError(Exception):
    """Base class for all package errors."""


class ShapeError(GNNRobustError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GNNRobustError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(GNNRobustError, ValueError):
    """Invalid or incomplete configuration (unknown kind, missing calibration...)."""


class ParseError(GNNRobustError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GraphValidationError(GNNRobustError, ValueError):
    """Graph structure violates an invariant (index range, symmetry, masks)."""


class TrainingError(GNNRobustError, RuntimeError):
    """Training diverged on clean data."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
