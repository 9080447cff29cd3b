"""Exception hierarchy shared by all fi3det modules."""


class Fi3detError(Exception):
    """Base class for every error raised by this package."""


# geometry
class EmptyInput(Fi3detError, ValueError):
    pass


class DegenerateGeometry(Fi3detError, ValueError):
    pass


# container / ingest
class FormatError(Fi3detError, ValueError):
    pass


class ShapeMismatch(Fi3detError, ValueError):
    pass


class NonOrthonormalPose(Fi3detError, ValueError):
    pass


class InsufficientDepth(Fi3detError, ValueError):
    pass


class EmptyMask(Fi3detError, ValueError):
    pass


# weighting / losses
class InvalidSigma(Fi3detError, ValueError):
    pass


class EmptyBox(Fi3detError, ValueError):
    pass


class ZeroNormFeature(Fi3detError, ValueError):
    pass


class EmptyRegion(Fi3detError, ValueError):
    pass


# prototypes and gates
class UnknownCategory(Fi3detError, KeyError):
    pass


class ZeroNormRow(Fi3detError, ValueError):
    pass


class DimensionMismatch(Fi3detError, ValueError):
    pass


class EmptySupport(Fi3detError, ValueError):
    pass


class NonFiniteLoss(Fi3detError, FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class CategoryWithoutPositives(Fi3detError, ValueError):
    def __init__(self, categories):
        self.categories = list(categories)
        super().__init__(f"no positive samples for categories: {self.categories}")


# evaluation
class ZeroGroundTruth(Fi3detError, ValueError):
    pass


class EmptySplit(Fi3detError, ValueError):
    pass


# synthetic world and sessions
class PlacementFailure(Fi3detError, RuntimeError):
    pass


class InsufficientSupport(Fi3detError, ValueError):
    pass


class CategoryCollision(Fi3detError, ValueError):
    pass


class FrozenStateViolation(Fi3detError, RuntimeError):
    pass
