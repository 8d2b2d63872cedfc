"""
Exception hierarchy shared by the library and the CLI.

Each error derives from the closest builtin so callers that only know
``ValueError`` / ``ArithmeticError`` still catch it.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_NUMERIC = 3


class SharpctlError(Exception):
    """Base class for all sharpctl errors."""

    exit_code = EXIT_USAGE


class ConfigError(SharpctlError, ValueError):
    """Invalid configuration or hyper-parameter combination."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
            self.exit_code = EXIT_PARSE
        super().__init__(message)


class ArchitectureError(SharpctlError, ValueError):
    """Parameter layout or input shape does not match the model."""


class DatasetParseError(SharpctlError, ValueError):
    """Malformed dataset or checkpoint file."""

    exit_code = EXIT_PARSE

    def __init__(self, message: str, offset: Optional[int] = None, unit: str = "line"):
        self.offset = offset
        self.unit = unit
        if offset is not None:
            message = f"{message} (at {unit} {offset})"
        super().__init__(message)


class NumericError(SharpctlError, ArithmeticError):
    """A non-finite value appeared during evaluation."""

    exit_code = EXIT_NUMERIC

    def __init__(
        self,
        message: str,
        layer: Optional[int] = None,
        sample: Optional[int] = None,
        inner_step: Optional[int] = None,
    ):
        self.layer = layer
        self.sample = sample
        self.inner_step = inner_step
        where = [
            f"{name}={value}"
            for name, value in (("layer", layer), ("sample", sample), ("inner_step", inner_step))
            if value is not None
        ]
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DegenerateFilterError(NumericError):
    """A filter (unit) has zero norm, so it cannot be normalized."""

    def __init__(self, layer: int, unit: int):
        self.unit = unit
        super().__init__(f"filter {unit} of layer {layer} has zero norm", layer=layer)


class UndefinedDirectionError(NumericError):
    """The full-data gradient vanishes, so no ascent direction exists."""


class NonBracketableError(NumericError):
    """A bisection search could not bracket its target deviation."""


class DivergenceError(NumericError):
    """Training loss blew up; the run is recorded as non-converged."""


class UndefinedCorrelationError(NumericError):
    """Rank correlation of a constant sequence is undefined."""


class DegenerateNormalizationError(NumericError):
    """Min-max normalization of a constant sequence is undefined."""
