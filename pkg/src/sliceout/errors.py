"""Exception hierarchy shared by every module."""


class SliceOutError(Exception):
    """Base class for all library errors."""


class ShapeError(SliceOutError, ValueError):
    pass


class AxisError(SliceOutError, ValueError):
    pass


class BoundsError(SliceOutError, IndexError):
    pass


class IndexListError(SliceOutError, IndexError):
    """Index lists that are unsorted, duplicated or out of range."""


class RateError(SliceOutError, ValueError):
    pass


class WidthError(SliceOutError, ValueError):
    pass


class LabelError(SliceOutError, ValueError):
    pass


class NumericError(SliceOutError, ArithmeticError):
    pass


class AlignmentError(SliceOutError, ValueError):
    """Tensors that must share one slice were given different slices."""


class UsageError(SliceOutError, RuntimeError):
    pass


class SizeError(SliceOutError, ValueError):
    pass


class FormatError(SliceOutError, ValueError):
    pass


class ConsistencyError(SliceOutError, ValueError):
    pass


class ConfigError(SliceOutError, ValueError):
    pass


class TrainingError(SliceOutError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
