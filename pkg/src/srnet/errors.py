"""Exception types raised across the package."""


class SrnetError(Exception):
    """Base class for all errors raised by srnet."""


class UnsupportedFormat(SrnetError, ValueError):
    pass


class CorruptHeader(SrnetError, ValueError):
    pass


class ImageTooSmall(SrnetError, ValueError):
    pass


class MalformedRow(SrnetError, ValueError):
    pass


class NonContiguousIndices(SrnetError, ValueError):
    pass


class DimensionMismatch(SrnetError, ValueError):
    pass


class ShapeMismatch(SrnetError, ValueError):
    pass


class PointOutOfDomain(SrnetError, ValueError):
    pass


class DepthMismatch(SrnetError, ValueError):
    pass


class ClassCountMismatch(SrnetError, ValueError):
    pass


class KTooLarge(SrnetError, ValueError):
    pass


class EmptyInput(SrnetError, ValueError):
    pass


class WindowTooLarge(SrnetError, ValueError):
    pass


class FieldTooSmall(SrnetError, ValueError):
    pass


class LengthMismatch(SrnetError, ValueError):
    pass


class EmptyMask(SrnetError, ValueError):
    pass


class DegenerateSample(SrnetError, ValueError):
    pass


class NonFiniteLoss(SrnetError, FloatingPointError):
    """Optimization diverged. ``trace`` holds the loss reports logged so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
