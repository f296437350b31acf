"""Exception types shared across the package."""


class GroqLocoError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(GroqLocoError, ValueError):
    """Array widths or shapes do not agree."""


class ContractError(GroqLocoError, ValueError):
    """A precondition of an operation was violated."""


class DegenerateInputError(ContractError):
    pass


class EmptyWindowError(ContractError):
    """A masked reduction was requested over a window with no valid steps."""


class ValidationError(GroqLocoError, ValueError):
    """A configuration or generator spec is invalid."""


class NumericalError(GroqLocoError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(GroqLocoError):
    """A file is not in the expected binary format (bad magic, bad header)."""


class VersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ShapeError(FormatError):
    """A stored tensor's shape disagrees with the architecture it claims."""
