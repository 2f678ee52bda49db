"""Exception hierarchy shared across the engine.

Every error carries a short machine-readable ``code`` so the CLI can emit
structured JSON failures without string-matching messages.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""

    code = "engine-error"


class ContractError(EngineError):
    """An operation was called in a state its contract forbids."""

    code = "contract-error"


class InvalidRangeError(EngineError):
    """A numeric range argument is empty or inverted (e.g. lo >= hi)."""

    code = "invalid-range"


class GridMismatchError(EngineError):
    """Two objects that must share a grid do not."""

    code = "grid-mismatch"


class EmptyMaskError(EngineError):
    """A mask required to be nonempty contains no nonzero voxels."""

    code = "empty-mask"


class TooSmallGridError(EngineError):
    """Grid too small for the requested stencil or architecture."""

    code = "grid-too-small"


class UndefinedOverlapError(EngineError):
    """Overlap metric undefined: both masks are empty."""

    code = "undefined-overlap"


class FormatError(EngineError):
    """A serialized file is malformed or has an unsupported version."""

    code = "format-error"


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""

    code = "checksum-mismatch"
