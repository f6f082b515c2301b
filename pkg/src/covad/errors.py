"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class NumericFailure(ArithmeticError):
    """Raised when a numerical routine cannot produce a valid result."""
