"""Exception types shared across the package."""


class FlowtrackError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowtrackError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericsError(FlowtrackError):
    """A numeric operation produced NaN/Inf or was otherwise invalid."""


class GeometryError(FlowtrackError):
    """Image / patch-grid geometry violates a divisibility or alignment rule."""


class FlowPolicyError(FlowtrackError):
    """A flow policy is malformed (blocked row, missing partition, bad K...)."""


class TrackingError(FlowtrackError):
    """Per-frame tracking failed (degenerate crop, invalid state)."""


class InputError(FlowtrackError):
    """User-supplied data (boxes, sequences, files) is invalid."""


class ConfigError(FlowtrackError):
    """Config text could not be parsed or violates an invariant.

    ``key`` carries the offending key path when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
