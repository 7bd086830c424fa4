"""Exception hierarchy shared across the package."""


class PriveriError(Exception):
    """Base class for all package errors."""


class DimensionError(PriveriError, ValueError):
    pass


class DegenerateRowError(PriveriError, ValueError):
    """A mask row has no unmasked entry."""


class NumericError(PriveriError, ArithmeticError):
    pass


class ContractError(PriveriError, ValueError):
    pass


class TrainingError(PriveriError, RuntimeError):
    """Loss became non-finite during optimisation."""


class FormatError(PriveriError, ValueError):
    """A file or record is malformed or truncated."""


class IntegrityError(PriveriError, ValueError):
    """A digest check failed."""


class CacheMissError(PriveriError, KeyError):
    pass


class InfeasibleError(PriveriError, ValueError):
    pass


class CapabilityError(PriveriError, ValueError):
    """Strategy is not available under the active privacy mode."""
