"""Exception hierarchy shared by all striatum modules."""


class StriatumError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StriatumError):
    """Invalid configuration, flags, or search-space definition (CLI exit 2)."""


class DataFormatError(StriatumError):
    """Malformed input file: NIfTI header/data, manifest CSV, model container."""


class TrainingError(StriatumError):
    """Training failed at runtime (divergence, degenerate data mid-run)."""
