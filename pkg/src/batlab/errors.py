"""Exception hierarchy shared across the package."""


class BatLabError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(BatLabError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(BatLabError):
    """A numeric value left the valid domain (non-finite, log of x <= 0, ...)."""


class ContractError(BatLabError):
    """A caller violated a documented precondition."""


class ConfigError(BatLabError):
    """Invalid, unknown, or missing configuration."""


class SpecificationError(BatLabError):
    """A dataset blueprint violates its placement invariants."""


class DatasetParseError(BatLabError):
    """A dataset file is malformed; message carries line/field context."""


class EmptySplitError(BatLabError):
    """A metric was requested over an empty sample set."""


class MissingArtifactError(BatLabError):
    """A pipeline stage input is absent; message names the producing command."""
