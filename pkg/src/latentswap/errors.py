"""Exception hierarchy shared across the package.

ConfigError and NumericError map to the CLI exit codes 2 and 3; everything
else is a plain programming error (ValueError / TypeError).
"""


class LatentSwapError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(LatentSwapError):
    """Bad configuration: missing files, invalid keys, inconsistent extents."""


class NumericError(LatentSwapError):
    """Numeric failure: non-finite values or a tolerance check that did not hold."""


class ReconstructionError(NumericError):
    """Inversion round trip exceeded its tolerance."""
