"""Exception types shared across the package.

Each maps to a machine-readable CLI error category (see cli.CATEGORY).
"""


class FedReidError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedReidError):
    """Invalid configuration value or inconsistent setup."""


class InputError(FedReidError):
    """Malformed operand passed to an operation (shape, range, finiteness)."""


class NumericError(FedReidError):
    """Non-finite value produced or supplied where finiteness is required."""


class StateError(FedReidError):
    """Objects from incompatible runs combined (layout/epoch mismatch)."""


class SamplingError(FedReidError):
    """Batch sampling impossible for the requested sizes."""


class DataLoadError(FedReidError):
    """Manifest or tensor file could not be ingested."""


class EvaluationError(FedReidError):
    """Retrieval evaluation impossible on the given data."""
