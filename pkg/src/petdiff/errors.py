"""Exception taxonomy shared across the package.

The CLI maps these onto distinct process exit codes (see cli module).
"""


class PetdiffError(Exception):
    """Base class for package-specific failures."""


class ConfigError(PetdiffError):
    """Invalid, unknown, or inconsistent configuration."""


class DataError(PetdiffError):
    """Missing or malformed dataset artifacts."""


class NumericalError(PetdiffError):
    """Non-finite values encountered where finite math is required."""


class CheckpointError(PetdiffError):
    """Checkpoint integrity or compatibility failure."""


class DegenerateStatisticsError(PetdiffError):
    """A statistic is undefined for the given inputs (e.g. zero-variance t-test)."""
