"""Exception hierarchy shared by every module."""


class MadoptError(Exception):
    """Base class for errors raised by this package."""


class SchemaError(MadoptError, ValueError):
    """CSV header or schema sidecar does not match the expected variables."""


class ParseError(MadoptError, ValueError):
    """A cell could not be parsed; carries the offending row and column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateColumnError(MadoptError, ValueError):
    """A column is constant where a spread is required."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class UnknownColumnError(MadoptError, KeyError):
    pass


class DivergenceError(MadoptError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class EnvelopeFitError(MadoptError, ValueError):
    """Covariance could not be factorised even after ridge regularisation."""


class SolverError(MadoptError, RuntimeError):
    """Non-finite model evaluation during optimisation."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class InfeasibleStartError(MadoptError, RuntimeError):
    """No start point satisfying bounds and envelope could be sampled."""


class ArtifactMissingError(MadoptError, FileNotFoundError):
    """An upstream pipeline artifact is absent."""


class NumericError(MadoptError, FloatingPointError):
    """A model returned a non-finite value for a perturbed sample."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(MadoptError, ValueError):
    """Invalid or incomplete run configuration."""
