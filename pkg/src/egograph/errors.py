"""Exception types raised across the package."""


class EgoGraphError(Exception):
    """Base class for all package errors."""


class DatasetFormatError(EgoGraphError, ValueError):
    """A benchmark directory is missing files or holds malformed lines."""


class DatasetConsistencyError(EgoGraphError, ValueError):
    """Benchmark files disagree with each other (e.g. an edge crossing graphs)."""


class InsufficientDataError(EgoGraphError, ValueError):
    pass


class ConfigurationError(EgoGraphError, ValueError):
    pass


class TrainingError(EgoGraphError, RuntimeError):
    """Training diverged. ``diagnostics`` carries the state at failure."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StateError(EgoGraphError, RuntimeError):
    pass
