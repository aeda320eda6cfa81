"""Exception hierarchy shared across the package."""


class HFUnlearnError(Exception):
    """Base class for all package errors."""


class ConfigError(HFUnlearnError, ValueError):
    """Invalid configuration or arguments."""


class PreconditionError(HFUnlearnError, ValueError):
    """A documented precondition of an operation does not hold."""


class DivergenceError(HFUnlearnError, FloatingPointError):
    """Numerical blow-up (non-finite values or a divergence guard).

    ``step`` is the global step index at which the problem was detected,
    or ``None`` when it does not apply.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DigestMismatchError(HFUnlearnError):
    """Artifacts do not share the provenance they claim to share."""


class FormatError(HFUnlearnError, ValueError):
    """Corrupt or unrecognised binary/text file."""
