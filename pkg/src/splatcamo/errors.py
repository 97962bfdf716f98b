"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument violates a documented precondition."""


class SchemaError(ValueError):
    """A file is structurally valid but does not match the expected schema."""


class ParseError(ValueError):
    """A file is malformed and cannot be decoded."""


class MissingTraceError(RuntimeError):
    """A gradient replay was requested from a render that kept no trace."""


class NotDifferentiableError(RuntimeError):
    """A gradient was requested through a non-differentiable code path."""


class TrainingFailedError(RuntimeError):
    """Detector training exhausted its budget without reaching the quality bar.

    Carries the training report so callers can inspect the failure.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
