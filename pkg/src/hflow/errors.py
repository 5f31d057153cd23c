"""Exception taxonomy shared across the package.

Validation errors (bad inputs, bad config, bad files) derive from
`ValidationError`; numeric/runtime failures derive from `NumericError`.
The CLI maps the former to exit code 1 and the latter to exit code 2.
"""


class HflowError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(HflowError):
    """Input, configuration, or file-format problem detected before work starts."""


class NumericError(HflowError):
    """Numeric failure encountered while computing."""


class DimensionMismatch(ValidationError):
    """Operands have incompatible dimensions."""


class ShapeMismatch(ValidationError):
    """Parameter and gradient/state shapes disagree."""


class DegenerateReflector(NumericError):
    """A Householder vector has norm at or below the stability floor."""


class NotOrthogonal(ValidationError):
    """Matrix fails the orthogonality precondition."""


class TraceMismatch(ValidationError):
    """A recorded forward trace does not match the model it is replayed against."""


class IndexOutOfRange(ValidationError):
    """Class index outside the valid label range."""


class ParseError(ValidationError):
    """A file could not be parsed; message carries the line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimMismatch(ValidationError):
    """Record or artifact dimension disagrees with its declared header."""


class UnknownLabel(ValidationError):
    """Record label not present in the dataset's declared class set."""


class EmptyDataset(ValidationError):
    """Dataset has no records, or a declared class has no records."""


class InsufficientSamples(ValidationError):
    """A sampled class cannot supply the requested support + query records."""
