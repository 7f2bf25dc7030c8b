"""Exception types raised across the package."""


class MotionDepthError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MotionDepthError, ValueError):
    pass


class ParameterError(MotionDepthError, ValueError):
    pass


class InvalidDepthError(MotionDepthError, ValueError):
    pass


class RangeError(MotionDepthError, ValueError):
    pass


class NumericError(MotionDepthError, FloatingPointError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class ProviderError(MotionDepthError, RuntimeError):
    pass


class SpecError(MotionDepthError, ValueError):
    pass


class IngestionError(MotionDepthError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class SampleIOError(MotionDepthError, OSError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class EvaluationError(MotionDepthError, ValueError):
    pass


class CompatibilityError(MotionDepthError, RuntimeError):
    pass
