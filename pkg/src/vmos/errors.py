"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class DataError(RuntimeError):
    """On-disk data is missing, malformed, or inconsistent."""


class NumericalError(RuntimeError):
    """A numerical routine produced non-finite values or diverged."""
