"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class PartAtlasError(Exception):
    """Base class for all toolkit errors."""


class InvalidRegionError(PartAtlasError, ValueError):
    """A region has zero or negative area, or lies outside its image."""


class ConfigError(PartAtlasError, ValueError):
    """A configuration value violates its documented constraints."""


class DataError(PartAtlasError):
    """A dataset, descriptor file, or model file is malformed or inconsistent."""


class MissingProposalError(DataError):
    """A region was passed that is not among an image's proposals."""


class NumericError(PartAtlasError, ArithmeticError):
    """A numeric invariant failed at runtime (non-finite value, bad denominator)."""
