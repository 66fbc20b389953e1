"""Exception hierarchy shared across the package."""


class SomnError(Exception):
    """Base class; ``kind`` is used by the CLI for one-line error reports."""

    kind = "error"


class ShapeError(SomnError, ValueError):
    kind = "shape"


class ParameterError(SomnError, ValueError):
    kind = "parameter"


class ConfigError(SomnError, ValueError):
    kind = "config"


class ParseError(SomnError, ValueError):
    kind = "parse"


class DigestMismatch(SomnError):
    kind = "digest"


class TrainingError(SomnError, RuntimeError):
    kind = "training"
