"""Exception types shared across the pipeline."""


class TileVitError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(TileVitError):
    """Invalid configuration or usage."""


class ContractError(TileVitError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class DataError(TileVitError):
    """Input data is invalid or inconsistent."""


class FormatError(DataError):
    """A file or array is not in the expected format."""


class ParseError(DataError):
    """A structured text file failed to parse; message carries the location."""


class NumericError(TileVitError):
    """A computation produced NaN or Inf."""
