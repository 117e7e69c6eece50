"""Exception hierarchy shared across the package."""


class AnomgenError(Exception):
    """Base class for all package errors."""


class ManifestParseError(AnomgenError):
    """A manifest line could not be parsed; the message names the line."""


class ManifestIntegrityError(AnomgenError):
    """Duplicate ids, missing referenced files, or inconsistent counts."""


class ValidationError(AnomgenError, ValueError):
    """An input record or argument violates a stated contract."""


class ShapeError(AnomgenError, ValueError):
    """Array dimensions incompatible with the operation."""


class RangeError(AnomgenError, ValueError):
    """A scalar argument (timestep, radius, ...) is out of range."""


class DomainError(AnomgenError, ValueError):
    """The input is outside the operation's mathematical domain."""


class DegenerateMaskError(AnomgenError, ValueError):
    """A mask downsampled to all-background where foreground is required."""


class SegmentLengthError(AnomgenError, ValueError):
    """A text segment exceeds the encoder's token limit."""


class ConfigError(AnomgenError):
    """Invalid configuration: unknown keys, targets, or impossible values."""


class SamplingError(AnomgenError, RuntimeError):
    """Coarse-mask sampling could not satisfy its constraints."""


class RetrievalError(AnomgenError, RuntimeError):
    """The retrieval client failed."""


class CaptioningError(AnomgenError, RuntimeError):
    """The captioning client failed for a record."""


class NonFiniteLossError(AnomgenError, RuntimeError):
    """Training hit a NaN/Inf loss; diagnostics were dumped if possible."""
