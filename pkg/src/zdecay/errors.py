"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericFailure(RuntimeError):
    """Raised when a numerical procedure fails to reach its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class ResolutionError(ValueError):
    """Raised when the mode grid is too coarse for the requested object."""


class ResourceLimit(MemoryError):
    """Raised when a basis would exceed the configured memory budget."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class ValidationError(ValueError):
    """Raised when a user-supplied kernel or profile fails validation."""


class ConsistencyError(RuntimeError):
    """Raised when two independent assemblies of one operator disagree."""


class CoverageError(RuntimeError):
    """Raised when an eigenbasis does not cover the support of a filter."""


class MissingArtifact(FileNotFoundError):
    """Raised by the report stage when expected files are absent."""
