"""Exception taxonomy shared across the package.

CLI exit-code mapping: FormatError -> 2, every other PixcorrError (and
ValueError) -> 3, numerical-check failures -> 4.
"""


class PixcorrError(Exception):
    """Base class for all package errors."""


class InvalidFlow(PixcorrError):
    """Flow grid contains non-finite values or mismatched dimensions."""


class OutOfBounds(PixcorrError):
    """Coordinate or frame index outside the valid domain."""


class FormatError(PixcorrError):
    """Malformed container bytes; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateVideo(PixcorrError):
    """Volume too short to track (fewer than two frames)."""


class MissingResiduals(PixcorrError):
    """Rethreshold requested on a set built without stored residuals."""


class PermissivenessError(PixcorrError):
    """New threshold params would extend already-truncated tracks."""


class InsufficientFrames(PixcorrError):
    """More distinct frames requested than the video contains."""


class DegenerateEmbedding(PixcorrError):
    """Zero-norm embedding row where a direction is required."""


class ShapeError(PixcorrError):
    """Operand shapes incompatible with the declared batch/head shapes."""
