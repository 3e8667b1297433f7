"""Exception hierarchy shared across the package.

Contract and parse errors map to CLI exit code 1, I/O errors to exit code 2.
"""


class PetsegError(Exception):
    """Base class for all package errors."""


class ContractError(PetsegError, ValueError):
    """An argument violates a documented precondition."""


class GeometryError(ContractError):
    """Shapes, spacings or orientations are inconsistent or unsupported."""


class BoundsError(ContractError):
    """A region does not fit inside its parent volume."""


class NiftiError(PetsegError, ValueError):
    """Malformed or unsupported NIfTI payload."""


class BadMagicError(NiftiError):
    pass


class TruncatedError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class CapacityError(NiftiError):
    """Volume extent does not fit the header's 16-bit dim fields."""
