"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Shapes or lengths that do not line up."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(RuntimeError):
    """API called out of order or with stale state."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DegenerateBatchError(ValueError):
    """Batch too small for batch statistics."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""
