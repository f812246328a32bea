"""Exception hierarchy shared across the package."""


class CmcmError(Exception):
    """Base class for all errors raised by cmcm."""


class ShapeMismatch(CmcmError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class DomainError(CmcmError, ValueError):
    """An operand lies outside the domain of the requested operation."""


class BoundaryError(DomainError):
    """A copula quantity is non-finite even after clamping to the unit box."""


class NonScalarRoot(CmcmError, ValueError):
    pass


class ArityMismatch(CmcmError, ValueError):
    pass


class UnsupportedDim(CmcmError, ValueError):
    pass


class NotPositiveDefinite(CmcmError, ValueError):
    pass


class MissingGmm(CmcmError, KeyError):
    pass


class ZeroVector(CmcmError, ValueError):
    pass


class SingleClass(CmcmError, ValueError):
    pass


class AllModalitiesAtRisk(CmcmError, ValueError):
    pass


class DataFormatError(CmcmError, ValueError):
    """Malformed dataset file; the message names the file and line."""

    def __init__(self, path, line=None, message=""):
        self.path = str(path)
        self.line = line
        where = self.path if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class DivergenceError(CmcmError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` and ``history`` hold the last good state so callers can
    still persist something useful.
    """

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history if history is not None else []
