"""Exception hierarchy shared by every stage of the pipeline."""


class KeystrokeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KeystrokeError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DomainError(KeystrokeError, ValueError):
    """An argument lies outside the domain of a numeric operation."""


class SchemaError(KeystrokeError):
    """A delimited file lacks a required column."""


class EmptyDatasetError(KeystrokeError):
    """No valid sequence survived parsing."""


class TooShortError(KeystrokeError, ValueError):
    """A keystroke sequence has fewer than two events."""


class ProtocolError(KeystrokeError):
    """The data cannot support the requested sampling or evaluation protocol."""


class NumericalDivergenceError(KeystrokeError, FloatingPointError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointIncompatibleError(KeystrokeError):
    """Checkpoint version or shapes do not match what the loader expects."""


class CheckpointIntegrityError(KeystrokeError):
    """Checkpoint payload is corrupted."""
