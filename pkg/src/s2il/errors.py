"""Exception hierarchy shared by every module in the package."""


class S2ILError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(S2ILError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(S2ILError, ValueError):
    """A precondition of an operation was violated."""


class NumericGuardError(S2ILError, ArithmeticError):
    """An operation would produce a non-finite or undefined real value."""


class TapeStateError(S2ILError, RuntimeError):
    """The gradient tape was used in an invalid state."""


class ConfigError(S2ILError, ValueError):
    """Experiment configuration is malformed or inconsistent."""
