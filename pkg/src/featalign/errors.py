"""Exception types raised across the package."""


class FeatAlignError(Exception):
    pass


class BehindCamera(FeatAlignError):
    """A point lies at or behind the z_min plane of the camera."""


class EmptyModel(FeatAlignError):
    """No 3D point survived reference-feature aggregation."""


class NoValidObservations(FeatAlignError):
    """Every point projected outside the valid image region at some level."""


class SingularSystem(FeatAlignError):
    """The damped normal equations could not be factorized."""


class InitializationFailed(FeatAlignError):
    """Every stage of the coarse-to-fine schedule was skipped."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoVisiblePoints(FeatAlignError):
    pass


class DegenerateRotationSet(FeatAlignError):
    """Weighted quaternion average has a repeated top eigenvalue."""


class SeedOutOfBounds(FeatAlignError):
    pass


class InfeasibleSpec(FeatAlignError):
    pass


class FormatError(FeatAlignError):
    """Malformed input file; carries the path and byte offset of the fault."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset
