"""Exception hierarchy shared by all ncode modules."""


class NcodeError(Exception):
    pass


class ShapeError(NcodeError, ValueError):
    pass


class LayoutError(ShapeError):
    pass


class ParameterError(NcodeError, ValueError):
    pass


class ConfigError(NcodeError, ValueError):
    pass


class UnsupportedConfigError(ConfigError):
    pass


class NumericalError(NcodeError, ArithmeticError):
    """Raised when a solve produces non-finite values; carries the time."""

    def __init__(self, message, t=None):
        if t is not None:
            message = f"{message} (t={t:.17g})"
        super().__init__(message)
        self.t = t


class BudgetError(NumericalError):
    """Step budget exhausted. ``partial`` holds the trajectory so far."""

    def __init__(self, message, t=None, partial=None):
        super().__init__(message, t)
        self.partial = partial


class OptimizerError(NcodeError, ArithmeticError):
    pass


class MigrationError(NcodeError):
    pass
