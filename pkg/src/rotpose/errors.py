"""Exception types raised across the package."""


class RotPoseError(Exception):
    pass


class PointAtInfinity(RotPoseError):
    pass


class SingularCamera(RotPoseError):
    pass


class CoincidentCenters(RotPoseError):
    pass


class DegenerateMatrix(RotPoseError):
    pass


class AngleNearPi(RotPoseError):
    pass


class DegenerateConfiguration(RotPoseError):
    pass


class DimensionMismatch(RotPoseError):
    pass


class NoConvergence(RotPoseError):
    pass


class DegenerateGeometry(RotPoseError):
    pass


class LinearSolveFailure(RotPoseError):
    pass


class InsufficientCameras(RotPoseError):
    pass


class NotUpgradable(RotPoseError):
    pass


class DegenerateScene(RotPoseError):
    pass


class ParseError(RotPoseError):
    def __init__(self, message, line=None, record=None):
        self.line = line
        self.record = record
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record is not None:
            where.append(f"record {record}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class VersionMismatch(ParseError):
    pass


class SingularCameraWarning(UserWarning):
    pass
