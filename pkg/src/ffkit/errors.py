"""Exception hierarchy shared by every ffkit module."""


class FFKitError(Exception):
    """Base class for all expected, user-facing failures."""


# geometry
class NonPositiveDepth(FFKitError, ValueError):
    pass


# frustum pipeline
class InvalidRatio(FFKitError, ValueError):
    pass


class EmptyFrustum(FFKitError):
    pass


# tensors / autodiff
class ShapeMismatch(FFKitError, ValueError):
    pass


class NumericError(FFKitError, FloatingPointError):
    pass


# box codec
class UnknownClass(FFKitError, KeyError):
    pass


class DecodeError(FFKitError, ValueError):
    pass


# model / training
class MissingGroundTruth(FFKitError, ValueError):
    pass


class EmptyDataset(FFKitError, ValueError):
    pass


class ConfigMismatch(FFKitError, ValueError):
    pass


# data io
class MalformedLine(FFKitError, ValueError):
    def __init__(self, lineno: int, reason: str, path: str | None = None):
        self.lineno = lineno
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else "line "
        super().__init__(f"{where}{lineno}: {reason}")


class MissingKey(FFKitError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing key"


class WrongArity(FFKitError, ValueError):
    pass


class BadRatios(FFKitError, ValueError):
    pass


class SpecInfeasible(FFKitError, RuntimeError):
    pass


class TruncatedFile(FFKitError, ValueError):
    pass


class BadContainer(FFKitError, ValueError):
    """A binary sample/checkpoint container failed validation."""


# metrics
class FrameMismatch(FFKitError, ValueError):
    pass
