"""Exception types shared across the package."""


class KRTODError(Exception):
    pass


class ConfigError(KRTODError, ValueError):
    pass


class ShapeError(KRTODError, ValueError):
    pass


class DomainError(KRTODError, ValueError):
    pass


class ParseError(KRTODError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(KRTODError, ArithmeticError):
    pass


class SizeError(KRTODError, ValueError):
    pass


class DegenerateDistributionError(KRTODError, ValueError):
    pass
