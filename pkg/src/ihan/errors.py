"""Exception types raised across the package."""


class IhanError(Exception):
    """Base class for all package errors."""


class DimensionError(IhanError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(IhanError, ValueError):
    """Input has nothing to operate on (empty mask, empty code list, ...)."""


class EvaluationError(IhanError, ArithmeticError):
    """A function produced a non-finite value."""


class ConsistencyError(IhanError, ValueError):
    """Two structures that must describe the same object disagree."""


class ParseError(IhanError, ValueError):
    """Malformed cohort input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(IhanError, ValueError):
    """Invalid configuration value."""


class DegenerateLabelError(IhanError, ValueError):
    """Training labels contain a single class."""


class UndefinedMetricError(IhanError, ValueError):
    """Metric is undefined for the given input (e.g. AUC with one class)."""


class CheckpointError(IhanError, ValueError):
    """Checkpoint file is unreadable or of an unsupported format."""
