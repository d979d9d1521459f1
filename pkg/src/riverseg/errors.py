"""Exception hierarchy shared by all riverseg modules."""


class RiversegError(Exception):
    """Base class for all toolkit errors."""


class ArgumentError(RiversegError, ValueError):
    """An argument violates an operation's precondition."""


class BoundsError(RiversegError, IndexError):
    """A window or index falls outside its parent raster."""


class FormatError(RiversegError):
    """A binary container is corrupt or has an unexpected layout."""


class IoError(RiversegError, OSError):
    """A path cannot be read or written."""


class AlignmentError(RiversegError):
    """Two rasters do not cover the same world extent."""


class DivergenceError(RiversegError):
    """Training produced a non-finite loss."""
