"""Exception hierarchy shared by every module of the package."""


class RemindError(Exception):
    """Base class for all package errors."""


class ShapeError(RemindError, ValueError):
    pass


class ParameterError(RemindError, ValueError):
    pass


class SymmetryError(RemindError, ValueError):
    pass


class NotPositiveDefiniteError(RemindError, ValueError):
    pass


class ConvergenceError(RemindError, ArithmeticError):
    pass


class WeightError(RemindError, ValueError):
    pass


class ArityError(RemindError, ValueError):
    pass


class DegenerateMapError(RemindError, ValueError):
    pass


class DegenerateChannelError(RemindError, ValueError):
    pass


class SegmentationError(RemindError, ValueError):
    pass


class StratificationError(RemindError, ValueError):
    pass


class DataError(RemindError, ValueError):
    pass


class NumericError(RemindError, ArithmeticError):
    """Non-finite value encountered; ``component`` names where it appeared."""

    def __init__(self, message, component=None):
        super().__init__(message if component is None else f"{component}: {message}")
        self.component = component
