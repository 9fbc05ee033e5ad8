"""Exception hierarchy shared by all modules."""


class StereoXCTError(Exception):
    """Base class for every error raised by this package."""


class InvalidGeometry(StereoXCTError, ValueError):
    pass


class RayParallelToDetector(StereoXCTError, ValueError):
    pass


class BehindSource(StereoXCTError, ValueError):
    pass


class EmptyCurve(StereoXCTError, ValueError):
    pass


class ParallelRays(StereoXCTError, ValueError):
    """Rays are (numerically) parallel; the matching geometry is degenerate."""


class DegenerateRecipe(StereoXCTError, RuntimeError):
    pass


class FeatureOutsideGrid(StereoXCTError, ValueError):
    pass


class SourceInsideVolume(StereoXCTError, ValueError):
    pass


class GeometryMismatch(StereoXCTError, ValueError):
    pass


class EmptyTrainingSet(StereoXCTError, ValueError):
    pass


class BlockLargerThanImage(StereoXCTError, ValueError):
    pass


class NoViews(StereoXCTError, ValueError):
    pass


class ToleranceNonPositive(StereoXCTError, ValueError):
    pass


class EndpointCountMismatch(StereoXCTError, ValueError):
    pass


class AllSamplesDegenerate(StereoXCTError, ValueError):
    pass


class ShapeMismatch(StereoXCTError, ValueError):
    pass


class AllSameTruthClass(StereoXCTError, ValueError):
    """ROC is undefined when the truth contains a single class."""
