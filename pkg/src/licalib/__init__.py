"""Spatiotemporal camera-LiDAR calibration from trajectories and 2D tracks.

Two-stage pipeline: a closed-form hand-eye solve for a rough extrinsic,
monocular scale and clock offset, followed by a structureless continuous-time
refinement of the extrinsic twist and time lag. A synthetic-rig simulator
provides ground truth for testing and experiment sweeps.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    CheiralityError,
    DegenerateMotionError,
    DegenerateRotationError,
    FileFormatError,
    InsufficientExcitationError,
    LowParallaxError,
    NoConstraintsError,
    NonConvergenceError,
    OnsetNotFoundError,
    OutOfRangeError,
    ScaleSignError,
    ScenarioInfeasibleError,
    SpanExclusionError,
    UnobservableCoreError,
    UnobservableTranslationError,
)
from .geometry import (
    ContinuousTrajectory,
    Pose,
    Rotation,
    StampedPose,
    exp_map,
    interpolate,
    log_map,
    relative_pose,
)

__all__ = [
    "CalibrationError",
    "CheiralityError",
    "ContinuousTrajectory",
    "DegenerateMotionError",
    "DegenerateRotationError",
    "FileFormatError",
    "InsufficientExcitationError",
    "LowParallaxError",
    "NoConstraintsError",
    "NonConvergenceError",
    "OnsetNotFoundError",
    "OutOfRangeError",
    "Pose",
    "Rotation",
    "ScaleSignError",
    "ScenarioInfeasibleError",
    "SpanExclusionError",
    "StampedPose",
    "UnobservableCoreError",
    "UnobservableTranslationError",
    "exp_map",
    "interpolate",
    "log_map",
    "relative_pose",
]
