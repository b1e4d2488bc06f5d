"""Exception types shared across the package.

The CLI maps these onto its exit codes, so each family stays distinct.
"""


class DermError(Exception):
    """Base class for all package errors."""


class DimensionError(DermError, ValueError):
    """Tensor shapes do not compose for the requested operation."""


class GraphConsumedError(DermError, RuntimeError):
    """backward() was called twice on the same recorded graph."""


class ConfigError(DermError, ValueError):
    pass


class DataError(DermError, ValueError):
    """Bad manifest, label, or image payload."""


class DivergenceError(DermError, RuntimeError):
    pass


class GradCheckError(DermError, RuntimeError):
    pass


class CheckpointError(DermError):
    pass


class BadMagicError(CheckpointError):
    pass


class CrcMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
