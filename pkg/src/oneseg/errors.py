"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EngineError):
    """Invalid configuration value or unusable run setup."""


# ---------------------------------------------------------------------------
# tensor / raster IO


class MalformedHeader(EngineError):
    """Tensor file header is structurally invalid."""


class UnsupportedDtype(EngineError):
    """Tensor file dtype is outside the accepted set."""


class ShapeMismatch(EngineError):
    """Tensor file shape has the wrong rank or inconsistent dims."""


class DecodeError(EngineError):
    """Image file could not be decoded as an 8-bit grayscale mask."""


# ---------------------------------------------------------------------------
# prototypes / prior selection


class EmptyForeground(EngineError):
    """Support mask contains no foreground at the required resolution."""


class AllCandidatesEmpty(EngineError):
    """Every binarization threshold produced an empty candidate mask."""


class MissingFixedValue(EngineError):
    """Fixed reference-area mode selected without a value."""


# ---------------------------------------------------------------------------
# refinement / segmenter backends


class EmptyPrior(EngineError):
    """Prior mask is empty where a nonempty one is required."""


class EmptyRegion(EngineError):
    """Distance-transform center requested for an empty region."""


class SegmenterFailure(EngineError):
    """A segmenter backend failed to produce a mask."""


class ProtocolError(EngineError):
    """Bridge wire-protocol violation (framing, fields, or dims)."""


class BridgeTimeout(EngineError):
    """Bridge did not answer within the configured timeout."""


class UnknownImageError(EngineError):
    """Bridge has no registered image under the requested id."""


# ---------------------------------------------------------------------------
# metrics


class EmptyGroundTruth(EngineError):
    """Ground-truth mask is empty; ranking metrics are undefined."""
