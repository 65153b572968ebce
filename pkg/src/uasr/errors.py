"""Exception taxonomy shared across the package."""


class UasrError(Exception):
    """Base class for all package errors."""


class ContractError(UasrError):
    """A caller violated a documented precondition (bad shapes, ranges, ...)."""


class FormatError(UasrError):
    """A file does not conform to its declared container format."""


class UnsupportedFormatError(UasrError):
    """A file is well-formed but uses an unsupported variant (e.g. stereo WAV)."""


class CapabilityError(UasrError):
    """An operation was asked for a feature it deliberately does not support."""


class InsufficientDataError(UasrError):
    """Not enough data to satisfy an algorithm's requirements."""
