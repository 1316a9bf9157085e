"""Exception types shared by the simulation modules."""


class TruncationError(ValueError):
    """Population reaches the top of the truncated Fock space."""


class StepSizeError(ValueError):
    """Time step too coarse for the fast scales of the generator."""


class DomainError(ValueError):
    """Argument outside the domain where a formula is defined."""


class DimensionMismatch(ValueError):
    """Operator or state has the wrong joint-space dimension."""


class CostError(RuntimeError):
    """Requested computation exceeds the configured work budget."""


class OracleBudgetError(CostError):
    """Dense reference matrix would exceed the configured size limit."""


class ZeroProbability(ArithmeticError):
    """Record weight vanished, so the conditional state is undefined."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""
