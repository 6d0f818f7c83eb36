"""Exception types shared across the package."""


class UsageError(ValueError):
    """Bad arguments: wrong activation, mismatched shapes, out-of-range options."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class DivergenceError(NumericError):
    """Training blew up (loss grew far beyond its initial value)."""
