"""Exception types raised across the package."""


class StereoPoseError(Exception):
    """Base class for all package errors."""


class DegenerateRotation(StereoPoseError, ValueError):
    pass


class InvalidRotation(StereoPoseError, ValueError):
    pass


class BehindCamera(StereoPoseError, ValueError):
    def __init__(self, index):
        super().__init__(f"point {index} lies at or behind the near plane")
        self.index = index


class ZeroDisparity(StereoPoseError, ValueError):
    pass


class EmptyModel(StereoPoseError, ValueError):
    pass


class FrustumExhausted(StereoPoseError, RuntimeError):
    pass


class IoFailure(StereoPoseError, OSError):
    pass


class ClassOutOfRange(StereoPoseError, ValueError):
    pass


class ShapeMismatch(StereoPoseError, ValueError):
    pass


class NonFiniteLoss(StereoPoseError, FloatingPointError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class TooFewKeypoints(StereoPoseError, ValueError):
    pass


class SingularInnovation(StereoPoseError, ArithmeticError):
    pass


class NonMonotonicTime(StereoPoseError, ValueError):
    pass


class ClassMismatch(StereoPoseError, ValueError):
    pass


class EmptyInput(StereoPoseError, ValueError):
    pass


class LengthMismatch(StereoPoseError, ValueError):
    pass
