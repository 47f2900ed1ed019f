"""Exception types shared across the package."""


class TwoGraphError(Exception):
    """Base class for every error raised by twograph."""


class ShapeError(TwoGraphError, ValueError):
    pass


class DomainError(TwoGraphError, ValueError):
    """A value lies outside the domain of a function (log of a non-positive number, gamma >= 1, ...)."""


class NonFiniteError(TwoGraphError, ArithmeticError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class MissingValueError(TwoGraphError, KeyError):
    """A sweep needed a sample or trace entry that was not supplied."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing value"


class ValidationError(TwoGraphError):
    def __init__(self, report):
        super().__init__("protocol failed validation:\n" + "\n".join(f"  - [{k}] {m}" for k, m in report.diagnostics))
        self.report = report


class ConfigError(TwoGraphError):
    pass
