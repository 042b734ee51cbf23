"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`KDError` and carries an
``exit_code`` used by the command line front end to report the failure
category.
"""


class KDError(Exception):
    exit_code = 1


class ArgumentError(KDError, ValueError):
    exit_code = 2


class DimensionError(ArgumentError):
    pass


class ValidationError(ArgumentError):
    """Invalid experiment configuration."""


class BuildError(ArgumentError):
    """Incompatible layer shapes while building a model."""


class ConsistencyError(ArgumentError):
    pass


class StateError(KDError, RuntimeError):
    pass


class HygieneError(KDError):
    """Anomaly-labelled data reached a stage that must only see normal data."""

    exit_code = 3


class NumericError(KDError, ArithmeticError):
    exit_code = 4


class DegenerateVarianceError(NumericError):
    pass


class FormatError(KDError):
    exit_code = 5


class CompatibilityError(KDError):
    exit_code = 5


class NotFoundError(KDError, FileNotFoundError):
    exit_code = 6
