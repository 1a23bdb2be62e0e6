"""Exception types shared across the package."""


class HomographyADError(Exception):
    pass


class DegenerateCorrespondence(HomographyADError, ValueError):
    """Point correspondences do not determine a unique homography."""


class PointAtInfinity(HomographyADError, ValueError):
    """A point maps to (or from) the line at infinity."""


class InfeasibleParams(HomographyADError, ValueError):
    pass


class AlignmentFailure(HomographyADError):
    pass


class InvalidSpec(HomographyADError, ValueError):
    pass


class NonFiniteLoss(HomographyADError, FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class UnknownLayer(HomographyADError, KeyError):
    pass


class DimensionMismatch(HomographyADError, ValueError):
    pass


class InsufficientNormals(HomographyADError, ValueError):
    pass


class SingleClass(HomographyADError, ValueError):
    """AUROC is undefined when only one label is present."""


class ConfigMismatch(HomographyADError, ValueError):
    """A persisted model was produced by a different feature extractor."""
