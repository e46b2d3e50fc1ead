"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError/UsageError -> 1,
SchemaError/ValidationError -> 2, TransportError -> 3, FailureCapExceeded -> 4.
"""


class FaircapError(Exception):
    """Base class for all toolkit errors."""


class UsageError(FaircapError):
    """Bad command-line invocation."""


class ConfigError(FaircapError):
    """Invalid or unresolvable configuration (including missing API keys)."""


class SchemaError(FaircapError):
    """Input file does not match its documented schema."""


class ValidationError(FaircapError):
    """Data value out of its declared range or otherwise unusable."""


class TransportError(FaircapError):
    """Endpoint call failed after exhausting retries."""

    def __init__(self, message: str, attempts: int = 0, attempt_log: list | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.attempt_log = attempt_log or []


class ParseError(FaircapError):
    """Model response could not be parsed into a prediction."""


class FailureCapExceeded(FaircapError):
    """Fraction of failed prediction rows exceeded the configured cap."""
