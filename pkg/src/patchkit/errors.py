"""Exception types shared across the package."""


class PatchkitError(Exception):
    """Base class for every error raised by this package."""


class FormatError(PatchkitError):
    """A file or byte stream does not follow its documented layout."""


class DataError(PatchkitError):
    """Input is syntactically valid but semantically unusable."""


class NumericError(PatchkitError):
    """A numeric operation cannot produce a meaningful result."""


class ContractError(PatchkitError):
    """An argument violates the documented calling contract."""
