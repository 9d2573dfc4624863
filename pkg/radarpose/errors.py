"""Exception hierarchy shared by every radarpose module."""


class RadarPoseError(Exception):
    """Base class for all errors raised by radarpose."""


# Poses and metrics

class InvalidPoseError(RadarPoseError):
    pass


class DegenerateTargetError(RadarPoseError):
    pass


class InsufficientFramesError(RadarPoseError):
    pass


# Radar geometry

class RadarDomainError(RadarPoseError):
    """Input outside the domain of a radar geometry formula."""


class UnresolvableAngleError(RadarDomainError):
    pass


class SingularElevationError(RadarDomainError):
    pass


class BehindSensorError(RadarDomainError):
    pass


class DegenerateGeometryError(RadarDomainError):
    pass


# Configuration and tensors

class ConfigError(RadarPoseError):
    pass


class ShapeError(RadarPoseError):
    pass


class PointSetError(RadarPoseError):
    pass


class EncoderError(RadarPoseError):
    def __init__(self, message, n_valid):
        super().__init__(f"{message} (n_valid={n_valid})")
        self.n_valid = n_valid


# Files on disk

class PreprocessError(RadarPoseError):
    pass


class DatasetError(RadarPoseError):
    pass


class MissingFileError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: expected {expected} bytes, found {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual


class VersionMismatchError(DatasetError):
    pass


class CheckpointError(RadarPoseError):
    pass


class EvaluationError(RadarPoseError):
    pass
