"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/configuration problems exit 1,
data-format problems exit 2, numeric/training failures exit 3.
"""


class PackbertError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PackbertError, ValueError):
    """Invalid configuration: unknown preset, bad key, violated invariant."""


class DataError(PackbertError, ValueError):
    """Malformed or inconsistent input data (corpora, datasets, containers)."""


class TrainingError(PackbertError, RuntimeError):
    """Numeric failure during training: non-finite gradients, bad resume state."""
