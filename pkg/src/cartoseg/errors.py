"""Exception types shared across the package."""


class CartosegError(Exception):
    """Base class for errors raised by this package."""


class ManifestError(CartosegError):
    """Corpus manifest is malformed (schema, duplicate ids, bad fields)."""


class DanglingReferenceError(ManifestError):
    """Manifest references a raster file that does not exist."""


class InfeasibleSplitError(CartosegError):
    """Requested split cannot be built (e.g. fewer annotated tiles than folds)."""


class EmptySplitError(CartosegError):
    """A split operation would produce an empty required subset."""


class PairingError(CartosegError):
    """Aligned historical/modern tiles could not be paired by tile id."""


class PaletteError(CartosegError):
    """Palette is incomplete or ambiguous for a requested (de)colorization."""


class ConfigError(CartosegError):
    """Invalid or inconsistent configuration values."""


class CheckpointError(CartosegError):
    """Checkpoint file is missing required fields or has a foreign format."""


class EmptyAggregateError(CartosegError):
    """An aggregation was requested over zero reports."""
