class IASSError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(IASSError, ValueError):
    """Invalid parameter or mutually inconsistent configuration."""


class IngestionError(IASSError):
    """Dataset files are missing, malformed or undecodable.

    ``offenders`` lists the paths (or song ids) that caused the failure.
    """

    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = f"{message}: {', '.join(map(str, self.offenders))}"
        super().__init__(message)


class NumericalError(IASSError, ArithmeticError):
    """A loss, gradient or parameter became non-finite."""


class CheckpointError(IASSError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class UndefinedMetricError(IASSError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""
