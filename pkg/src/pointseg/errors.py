"""Exception hierarchy shared by every module in the package."""


class PointSegError(Exception):
    """Base class for all package errors."""


class ParseError(PointSegError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(PointSegError):
    pass


class FormatError(PointSegError):
    pass


class DataError(PointSegError, ValueError):
    pass


class ConfigError(PointSegError, ValueError):
    pass


class ArgumentError(PointSegError, ValueError):
    pass


class ShapeError(PointSegError, ValueError):
    pass


class OptimizationError(PointSegError, FloatingPointError):
    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class TrainingDiverged(PointSegError, FloatingPointError):
    def __init__(self, message, epoch=None, scene=None):
        self.epoch = epoch
        self.scene = scene
        super().__init__(message)


class BudgetExceeded(PointSegError):
    """Raised by a sampler when its wall-clock deadline passes mid-call."""


class MemoryBudgetExceeded(PointSegError):
    def __init__(self, message, required_bytes):
        self.required_bytes = required_bytes
        super().__init__(message)
