"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage errors exit 2,
data errors exit 3, numerical failures exit 4.
"""


class RendactError(Exception):
    """Base class for package-specific failures."""


class BranchAmbiguityError(RendactError, ValueError):
    """Rotation angle at or near pi: the matrix logarithm branch is ambiguous."""


class BehindCameraError(RendactError, ValueError):
    """A point to be projected lies at or behind the camera near plane."""


class DegenerateGeometryError(RendactError, ValueError):
    """Point configuration too degenerate for rigid registration."""


class NoVisibilityError(RendactError, RuntimeError):
    """No camera sees any rendered gripper point; image-space update impossible."""


class TrainingDivergedError(RendactError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class InfeasibleDemoError(RendactError, RuntimeError):
    """A scripted demonstration could not be generated for the requested pose."""


class DataFormatError(RendactError, RuntimeError):
    """A dataset, model, or config file is malformed."""
