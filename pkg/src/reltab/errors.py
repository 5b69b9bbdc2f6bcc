"""Exception hierarchy shared across the package."""


class RelTabError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class ParseError(RelTabError):
    pass


class SchemaError(RelTabError):
    pass


class ConfigError(RelTabError):
    pass


class ShapeError(RelTabError, ValueError):
    pass


class NonFiniteError(RelTabError, FloatingPointError):
    pass


class NotScalarError(RelTabError, ValueError):
    pass


class DimensionMismatch(RelTabError, ValueError):
    pass


class InsufficientRows(RelTabError):
    pass


class NoMaskablePosition(RelTabError):
    pass


class NoHeadForColumn(RelTabError, KeyError):
    pass


class NoCandidates(RelTabError):
    pass


class EmptyContext(RelTabError):
    pass


class EmptyResults(RelTabError):
    pass


class CheckpointIOError(RelTabError, OSError):
    pass


class VersionMismatch(RelTabError):
    pass


class SchemaHashMismatch(RelTabError):
    pass
