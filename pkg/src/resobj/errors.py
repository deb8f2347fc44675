"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class DomainError(ContractError):
    """A numeric primitive was applied outside its domain (e.g. log of <= 0)."""


class FormatError(ValueError):
    """A file (checkpoint, config, scene dump) does not match its format."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value where finiteness is required."""
