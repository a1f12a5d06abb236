"""Exception types shared across the package."""


class SelfVOSError(Exception):
    """Base class for all package errors."""


class ShapeError(SelfVOSError, ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigError(SelfVOSError, ValueError):
    """A configuration value violates its constraints."""


class ContractError(SelfVOSError, ValueError):
    """A function was called outside its precondition."""


class DataError(SelfVOSError, ValueError):
    """Input data is missing, inconsistent or malformed."""


class IntegrityError(SelfVOSError, ValueError):
    """A persisted file is truncated or corrupted."""


class IncompatibleVersionError(SelfVOSError, ValueError):
    """A persisted file was written by an unsupported format version."""
