"""Exception hierarchy.

The three top-level categories (config, data, numeric) map to distinct CLI
exit codes, see :mod:`fewshot_forecast.cli`.
"""


class FewShotError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FewShotError, ValueError):
    pass


class DataError(FewShotError, ValueError):
    pass


class NumericError(FewShotError, ArithmeticError):
    pass


class ShapeError(FewShotError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptySupportError(FewShotError, ValueError):
    pass


class InsufficientHistoryError(FewShotError, ValueError):
    pass


class IngestionError(DataError):
    pass


class DegenerateTaskError(DataError):
    pass


class TaskTooSmallError(DataError):
    pass


class PoisonedGradientError(NumericError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; update aborted")
        self.name = name


class NonFiniteLossError(NumericError):
    pass
