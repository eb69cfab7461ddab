"""Exception hierarchy. Every error carries a stable class name used in messages."""


class OffsetLabError(Exception):
    pass


class ShapeMismatch(OffsetLabError, ValueError):
    pass


class EmptyVector(OffsetLabError, ValueError):
    pass


class BadLabel(OffsetLabError, ValueError):
    pass


class BadLayer(OffsetLabError, IndexError):
    pass


class BadFrame(OffsetLabError, IndexError):
    pass


class SamplingFinished(OffsetLabError, RuntimeError):
    pass


class BadWeight(OffsetLabError, ValueError):
    pass


class BadSensitivity(OffsetLabError, ValueError):
    pass


class NoEligibleSteps(OffsetLabError, ValueError):
    pass


class ImageTooSmall(OffsetLabError, ValueError):
    pass


class IncomparableRuns(OffsetLabError, ValueError):
    pass


class BadConfig(OffsetLabError, ValueError):
    """Invalid run configuration; ``field`` is the dotted path of the offending key."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)
