"""Exception categories shared across modules. The CLI maps each category to a
distinct exit code and a single machine-parsable error line."""


class SainError(Exception):
    """Base class; category drives the CLI exit code."""

    category = "error"
    exit_code = 1


class IoError(SainError):
    category = "io"
    exit_code = 3


class ParseError(SainError):
    category = "parse"
    exit_code = 4


class ShapeError(SainError):
    category = "shape"
    exit_code = 5


class DivergenceError(SainError):
    category = "divergence"
    exit_code = 6


class ManifestDriftError(SainError):
    category = "manifest-drift"
    exit_code = 7
