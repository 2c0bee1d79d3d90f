"""Exception hierarchy shared by all planeseg modules.

Each class carries the CLI exit code it maps to so that command handlers can
translate failures without a lookup table.
"""


class PlaneSegError(Exception):
    exit_code = 70


class ConfigurationError(PlaneSegError, ValueError):
    """Invalid parameters, mismatched sizes, or malformed config files."""

    exit_code = 64


class DegenerateInputError(PlaneSegError, ValueError):
    """Input is geometrically degenerate (collinear points, zero-norm vectors)."""

    exit_code = 70


class ShapeError(PlaneSegError, ValueError):
    exit_code = 70


class NormalizationError(PlaneSegError, ZeroDivisionError):
    """A loss was requested with zero positive matches."""

    exit_code = 70


class DatasetIOError(PlaneSegError, OSError):
    exit_code = 2


class FormatError(DatasetIOError):
    """File exists but does not follow the expected format."""


class IntegrityError(DatasetIOError):
    """Label image and sidecar disagree."""


class CapacityError(DatasetIOError):
    """Too many instances for a 16-bit label image."""


class InvariantViolation(PlaneSegError):
    exit_code = 70
