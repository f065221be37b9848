"""Exception types shared across the package."""


class PointsplatError(ValueError):
    """Base class for validation and domain errors."""


class DegenerateRotationError(PointsplatError):
    """Quaternion norm too small to define a rotation."""


class DegenerateCovarianceError(PointsplatError):
    """Covariance matrix is singular or not positive definite."""


class CulledPointError(PointsplatError):
    """Point lies behind the near plane; not renderable from this camera."""


class CameraValidationError(PointsplatError):
    """Camera parameters violate the model invariants."""


class PlyParseError(PointsplatError):
    """Malformed PLY input. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(PointsplatError):
    """Malformed or unrecognized checkpoint file."""


class FitDivergenceError(RuntimeError):
    """Optimization diverged. Carries the partial fit report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
