"""Exception hierarchy shared by every module."""


class CentroidAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(CentroidAdaptError, ValueError):
    """Invalid configuration value or missing field."""


class ShapeError(CentroidAdaptError, ValueError):
    """Array dimensions do not agree."""


class LabelingError(CentroidAdaptError, ValueError):
    """Cluster/class correspondence cannot be established."""


class ParseError(CentroidAdaptError, ValueError):
    """Malformed dataset, checkpoint or centroid file."""


class EvaluationError(CentroidAdaptError, ValueError):
    """Evaluation requested on unusable input (e.g. empty data)."""


class NumericalError(CentroidAdaptError, ArithmeticError):
    """Training produced a non-finite loss or parameter."""
