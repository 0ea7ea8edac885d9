"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to
distinct process exit statuses without a lookup table.
"""


class HubProbeError(Exception):
    exit_code = 1


class ConfigError(HubProbeError, ValueError):
    exit_code = 2


class IoError(HubProbeError, OSError):
    exit_code = 3


class DataError(HubProbeError, ValueError):
    exit_code = 4


class NumericError(HubProbeError, ArithmeticError):
    exit_code = 5


# numeric kernel
class ZeroNorm(NumericError):
    pass


class ZeroVariance(NumericError):
    pass


class DimMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class BadLabel(DataError):
    pass


# persistence
class BadMagic(IoError):
    pass


class VersionUnsupported(IoError):
    pass


class CorruptIndex(IoError):
    pass


# data preparation
class BadSpec(ConfigError):
    pass


class BadFractions(ConfigError):
    pass


class BadFraction(ConfigError):
    pass


class BadDims(ConfigError):
    pass


class BadK(ConfigError):
    pass


class EmptyIntersection(DataError):
    pass


class MissingEmbedding(DataError):
    pass


class EmptyDataset(DataError):
    pass


class MissingCovariate(DataError):
    pass


class SizeMismatch(DataError):
    pass


class MissingVariant(DataError):
    pass


class TooSmallForDerangement(DataError):
    pass


class EmptyCategory(DataError):
    pass


class NoRuns(DataError):
    pass


class StaleCache(HubProbeError, RuntimeError):
    exit_code = 5
