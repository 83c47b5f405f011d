"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, shapes, or preconditions."""


class NumericalError(RuntimeError):
    """Non-finite values or other numerical failures."""


class DivergenceError(NumericalError):
    """Training loss became non-finite.

    Carries the epoch index at which divergence was detected.
    """

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IngestionError(RuntimeError):
    """Dataset files missing, malformed, or inconsistent."""


class CapabilityError(RuntimeError):
    """The numerical backend lacks a required capability."""


class ExplanationError(RuntimeError):
    """A stage of the explanation pipeline failed.

    Wraps the underlying exception and labels the failed stage
    (segment / sample / weight / fit).
    """

    def __init__(self, stage, cause):
        super().__init__(f"explanation stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
