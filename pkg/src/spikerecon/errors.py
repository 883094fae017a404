"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input value violates a documented precondition."""


class ShapeError(ValidationError):
    """Array dimensions do not match what the operation requires."""


class ParseError(ValidationError):
    """A data file is malformed; message carries the offending line number."""


class EmptySelectionError(ValidationError):
    """A filter or selection produced zero units/columns."""


class SingularSystemError(ValueError):
    """Linear system is singular; a positive regularizer is required."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class SemanticModelQualityError(RuntimeError):
    """Semantic feature model failed its held-out accuracy gate."""


class ArtifactError(RuntimeError):
    """A required upstream artifact is missing or would be overwritten."""
