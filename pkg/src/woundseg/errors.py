"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A layer or model configuration violates its constraints."""


class ContractError(ValueError):
    """An operation precondition does not hold (e.g. empty batch, bad value range)."""


class GraphError(RuntimeError):
    """Misuse of the differentiation machinery."""
