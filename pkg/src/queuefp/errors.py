"""Exception hierarchy.

The CLI maps these onto its exit codes: ``DataError`` -> 2,
``NumericalError`` -> 3.
"""


class QueueFPError(Exception):
    pass


class DataError(QueueFPError, ValueError):
    """Bad or insufficient input data."""


class EventFormatError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProfileError(DataError):
    pass


class CalibrationError(DataError):
    pass


class ConfigError(QueueFPError, ValueError):
    """Inconsistent model or run configuration."""


class NumericalError(QueueFPError, RuntimeError):
    def __init__(self, message: str, residuals=None):
        self.residuals = list(residuals) if residuals is not None else []
        super().__init__(message)


class ConvergenceError(NumericalError):
    pass
