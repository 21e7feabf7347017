"""Exception taxonomy shared by every module.

All errors raised on bad input derive from ValueError so callers that do not
care about the fine-grained class can catch that; runtime-order and numeric
failures derive from RuntimeError / ArithmeticError respectively.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A numeric parameter is outside its allowed range."""


class EmptyBatchError(ValueError):
    """An operation received a batch with zero rows."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class ParseError(ValueError):
    """A data, config, or checkpoint file could not be parsed."""


class ConfigError(ValueError):
    """A run configuration is invalid or incomplete."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise invalid values."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""
