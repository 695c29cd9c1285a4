"""Exception types shared across the package.

Every failure mode that callers are expected to handle maps to one of
these classes; nothing downstream should ever see a half-parsed file or
a silently wrong array.
"""


class VrfError(Exception):
    """Base class for all errors raised by this package."""


class TensorFormatError(VrfError):
    """A tensor file is malformed: bad magic, bad header, or size mismatch."""


class ManifestError(VrfError):
    """A dataset manifest violates its schema or references bad data."""


class ValidationError(VrfError):
    """An in-memory input violates a precondition (shape, range, NaN, ...)."""


class EmptyIndexError(VrfError):
    """A distance query was issued against an index with no members."""
