"""Exception types raised across the scenefit library."""


class SceneFitError(Exception):
    """Base class for all scenefit errors."""


class DepthNonPositive(SceneFitError):
    """A point projected with depth at or behind the camera plane."""


class DegenerateGeometry(SceneFitError):
    """Input geometry is degenerate (collinear points, zero quaternion, ...)."""


class NoSolution(SceneFitError):
    """A minimal solver produced no geometrically valid pose."""


class TooFewCorrespondences(SceneFitError):
    """Fewer correspondences than the solver's minimum."""


class NoConsensus(SceneFitError):
    """RANSAC found no model with enough inliers."""


class DimensionMismatch(SceneFitError):
    """Descriptor or array dimensions do not agree."""


class EmptyInput(SceneFitError):
    """An operation received an empty input it cannot work with."""


class NonFiniteLoss(SceneFitError):
    """The scene loss is not finite at the given parameters."""


class MissingTransform(SceneFitError):
    """A solution lacks a transform for a referenced object."""


class AllObjectsNeglected(SceneFitError):
    """Every object in the scene failed matching or consensus."""


class PlacementFailure(SceneFitError):
    """Synthetic scene generation could not place objects within bounds."""


class SchemaError(SceneFitError):
    """A scene or solution file failed schema validation."""
