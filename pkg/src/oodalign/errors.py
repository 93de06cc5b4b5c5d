"""Error types shared across the package.

The CLI maps these onto process exit codes, so raising the right family
matters more than the message text: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class OodAlignError(Exception):
    """Base class for all package errors."""


class ConfigError(OodAlignError):
    """Invalid or inconsistent run configuration."""


class DataError(OodAlignError):
    """Malformed dataset, checkpoint, or cache artifact."""


class NumericError(OodAlignError):
    """Numeric failure: non-finite values, degenerate inputs."""
