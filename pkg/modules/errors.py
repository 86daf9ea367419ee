"""
Errors Module
Exception hierarchy shared by every module.
"""


class GlueError(Exception):
    """Base class for all matcher errors."""


class ShapeError(GlueError):
    """Operand shapes do not fit the primitive or layer."""


class TapeError(GlueError):
    """Tape misuse: consumed tape, unbound input, bad seed."""


class NumericalError(GlueError):
    """A non-finite value appeared where finite values are required."""


class FeatureError(GlueError):
    """Invalid feature set or malformed feature file."""


class GeometryError(GlueError):
    """Homography sampling, warping or estimation failed."""


class MatchingError(GlueError):
    """Matching cannot proceed on the given inputs."""


class RecordingError(GlueError):
    """A diagnostic needs data that was not recorded."""


class CheckpointError(GlueError):
    """Checkpoint or training-state file is corrupt or inconsistent."""


class ConfigError(GlueError):
    """Experiment configuration is invalid."""
