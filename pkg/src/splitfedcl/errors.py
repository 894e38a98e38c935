"""Exception types raised across the package."""


class SplitFedError(Exception):
    """Base class for all package errors."""


class DegenerateMask(SplitFedError, ValueError):
    """Mask is all-true or all-false, so no boundary exists."""


class InvalidSigma(SplitFedError, ValueError):
    pass


class MissingClass(SplitFedError, ValueError):
    """A requested class id does not occur in the label map."""


class ShapeError(SplitFedError, ValueError):
    pass


class CacheError(SplitFedError, RuntimeError):
    """Backward pass requested with a cache that no longer matches the parameters."""


class EmptyBatch(SplitFedError, RuntimeError):
    pass


class WireError(SplitFedError, ValueError):
    """Malformed or corrupted transport frame."""


class PlacementError(SplitFedError, RuntimeError):
    pass


class ConfigError(SplitFedError, ValueError):
    pass


class MissingRun(SplitFedError, FileNotFoundError):
    pass
