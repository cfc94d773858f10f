from __future__ import annotations

from typing import Optional


class GfcsError(Exception):
    pass


class InvalidInputError(GfcsError):
    pass


class NumericalFailureError(GfcsError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class TrainingError(GfcsError):
    def __init__(self, message: str, epoch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(GfcsError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class DegenerateDirectionError(GfcsError):
    def __init__(self, message: str, norm: float):
        super().__init__(message)
        self.norm = norm


class BasisExhaustedError(GfcsError):
    pass


class BudgetExceededError(GfcsError):
    def __init__(self, budget: int):
        super().__init__(f"query budget exhausted: {budget}")
        self.budget = budget


class EmptySelectionError(GfcsError):
    pass


class ShortfallError(GfcsError):
    def __init__(self, available: int, requested: int):
        super().__init__(
            f"only {available} correctly classified examples available,"
            f" but {requested} were requested"
        )
        self.available = available
        self.requested = requested


class ConfigError(GfcsError):
    pass


__all__ = [
    "BasisExhaustedError",
    "BudgetExceededError",
    "ConfigError",
    "DegenerateDirectionError",
    "EmptySelectionError",
    "FormatError",
    "GfcsError",
    "InvalidInputError",
    "NumericalFailureError",
    "ShortfallError",
    "TrainingError",
    "UnsupportedVersionError",
]
