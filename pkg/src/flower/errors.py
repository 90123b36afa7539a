"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A non-finite value showed up where a finite one is required.

    ``where`` carries whatever locating context the raiser had (layer index,
    epoch, phase, batch), so the CLI can print it without parsing messages.
    """

    def __init__(self, message: str, **where):
        self.where = dict(where)
        if where:
            detail = ", ".join(f"{k}={v}" for k, v in where.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class DatasetParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CheckpointError(RuntimeError):
    pass
