"""Exception hierarchy shared across the pipeline.

Every error carries a short machine-parseable ``category`` that the CLI
prints on stderr as ``<category>: <message>``.
"""


class BovwError(Exception):
    """Base class for all pipeline errors."""

    category = "error"


class ParameterError(BovwError):
    """Invalid argument or configuration value."""

    category = "parameter"


class DecodeError(BovwError):
    """Image file could not be decoded."""

    category = "decode"


class DatasetError(BovwError):
    """Dataset layout problem (no classes, undersized class, ...)."""

    category = "dataset"


class InsufficientDataError(BovwError):
    """Not enough samples to run an operation (e.g. fewer descriptors than Z)."""

    category = "insufficient-data"


class DimensionMismatchError(BovwError):
    """Vector dimension does not match the model or codebook."""

    category = "dimension-mismatch"


class FormatError(BovwError):
    """Artifact file is malformed or has an unsupported magic/version."""

    category = "format"


class MissingArtifactError(BovwError):
    """A required upstream artifact does not exist."""

    category = "missing-artifact"


class StaleArtifactError(BovwError):
    """An artifact's recorded input hashes no longer match the inputs."""

    category = "stale-artifact"
