"""Exception hierarchy shared across the package."""


class HRTradeError(Exception):
    """Base class for all package errors."""


class ConfigError(HRTradeError, ValueError):
    pass


class DataError(HRTradeError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInputError(DataError):
    pass


class ValidationError(DataError):
    pass


class WindowError(DataError):
    """Not enough history to build a state window."""


class StreamError(DataError):
    """LOB stream too short for the requested execution episode."""


class LiquidityError(HRTradeError, RuntimeError):
    pass


class LifecycleError(HRTradeError, RuntimeError):
    pass


class ShapeError(HRTradeError, ValueError):
    pass


class NumericError(HRTradeError, FloatingPointError):
    pass


class InfeasibleRebalanceError(HRTradeError, RuntimeError):
    pass


class BankruptcyError(HRTradeError, RuntimeError):
    pass


class TrainingDivergenceError(HRTradeError, RuntimeError):
    pass
