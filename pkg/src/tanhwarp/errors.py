"""Exception types shared across the package."""


class TanhwarpError(Exception):
    """Base class for all package-specific errors."""


class DegenerateLandmarks(TanhwarpError):
    """Landmark configuration too degenerate to estimate a similarity."""


class OutOfDomain(TanhwarpError):
    """Input outside the mathematical domain of the map (e.g. atanh at |x| >= 1)."""


class DegenerateBox(TanhwarpError):
    """Box collapsed below one feature pixel in some dimension."""


class ShapeMismatch(TanhwarpError):
    """Tensor or image shapes incompatible with the operation."""


class ClassOutOfRange(TanhwarpError):
    """Target class index not representable by the score tensor."""


class GraphConsumed(TanhwarpError):
    """Backward called on a graph that has already been swept."""


class NonFiniteLoss(TanhwarpError):
    """Training loss became NaN or infinite."""


class MalformedFile(TanhwarpError):
    """A data file failed validation.

    Carries the offending path and, when meaningful, the byte offset.
    """

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{where}: {message}")
