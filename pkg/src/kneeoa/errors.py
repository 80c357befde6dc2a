"""Exception types shared across the package.

Every failure mode callers are expected to branch on gets its own class,
so tests and the CLI can match on type instead of message text.
"""


class KneeOAError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(KneeOAError):
    """A scalar argument or option is out of its documented range."""


class DimensionError(KneeOAError):
    """Array shapes or dtypes are inconsistent with the operation."""


class StateError(KneeOAError):
    """Mutable state (optimizer slots, model mode) is missing or stale."""


class ParseError(KneeOAError):
    """A text input (manifest, annotation, config, PGM header) is malformed.

    Carries enough location detail in the message to find the offending
    line or field.
    """


class DetectionFailureError(KneeOAError):
    """Fewer than two joint candidates were found in a probability map."""

    def __init__(self, found: int, message: str | None = None):
        self.found = found
        if message is None:
            message = f"expected 2 joint regions, found {found}"
        super().__init__(message)


class WeightFormatError(KneeOAError):
    """A weight file has a bad magic number or malformed structure."""


class WeightShapeError(KneeOAError):
    """A weight file parsed cleanly but does not match the target model."""


class WeightTruncationError(KneeOAError):
    """A weight file ended before its declared payload was complete."""
