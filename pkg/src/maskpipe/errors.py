"""Exception hierarchy shared by all maskpipe modules.

Two branches matter for the CLI exit-code contract: ValidationError maps
to exit code 1, FormatError to exit code 2.
"""


class MaskPipeError(Exception):
    """Base class for all maskpipe errors."""


class ValidationError(MaskPipeError):
    """Input or configuration violates a documented invariant."""


class FormatError(MaskPipeError):
    """A file or byte stream is structurally unreadable."""


class InvalidGeometryError(ValidationError):
    """Box coordinates are non-finite or otherwise unusable."""


class ConfigurationError(ValidationError):
    """Mutually inconsistent parameters (shapes, weights, thresholds)."""


class DecodeError(ValidationError):
    """Raw backbone output cannot be decoded into detections."""


class InvalidAnnotationError(ValidationError):
    """A ground-truth annotation violates its invariants."""


class MissingSupportError(ValidationError):
    """A class has no (or too few) support samples."""


class SingularCovarianceError(ValidationError):
    """A class covariance is not positive definite."""


class PipelineError(MaskPipeError):
    """The video pipeline aborted mid-stream."""
