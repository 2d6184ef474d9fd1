"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, VerificationError -> 1. Everything else is a bug and
propagates.
"""


class TdconvsError(Exception):
    pass


class DimensionError(TdconvsError):
    """Tensor or grid shapes are incompatible."""


class ContractError(TdconvsError):
    """A documented precondition was violated by the caller."""


class ConfigError(TdconvsError):
    """Bad key, bad type or inconsistent value in a run configuration."""


class DataError(TdconvsError):
    """Malformed input data (unparseable row, label out of range, ...)."""


class TrainingError(TdconvsError):
    """Non-finite gradients or other optimizer-level failures."""


class MetricError(TdconvsError):
    """Metric requested on an empty or invalid confusion matrix."""


class VerificationError(TdconvsError):
    """A gradcheck or benchmark self-check failed."""
