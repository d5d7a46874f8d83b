"""Exception hierarchy shared by all subpackages."""


class BncdeError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(BncdeError, ValueError):
    """Operand shapes do not conform."""


class DomainError(BncdeError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class ConfigError(BncdeError, ValueError):
    """Unknown option or inconsistent configuration."""


class ContractError(BncdeError, RuntimeError):
    """An API contract was violated (wrong call order, mismatched grids, ...)."""


class ArgumentError(BncdeError, ValueError):
    """Invalid argument value (empty input, out-of-window event, ...)."""


class NumericalError(BncdeError, ArithmeticError):
    """Computation produced non-finite values."""
