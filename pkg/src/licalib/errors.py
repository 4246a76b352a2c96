"""Exception hierarchy for the calibration pipeline.

Calibration-stage failures derive from :class:`CalibrationError` and carry a
short machine-readable ``code`` plus the pipeline ``stage`` that raised them.
File and format problems derive from :class:`FileFormatError` instead, so the
CLI can map the two families to distinct exit codes.
"""

from __future__ import annotations


class CalibrationError(Exception):
    """Base class for failures of a calibration stage (not I/O)."""

    code = "calibration-error"

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class DegenerateRotationError(CalibrationError):
    """Rotation too close to a half turn for a unique log map."""

    code = "degenerate-rotation"


class OutOfRangeError(CalibrationError):
    """Query timestamp outside the trajectory knot span."""

    code = "out-of-range"


class OnsetNotFoundError(CalibrationError):
    """No motion onset detected in a signal."""

    code = "onset-not-found"


class InsufficientExcitationError(CalibrationError):
    """Too few relative-pose pairs with enough rotation."""

    code = "insufficient-excitation"


class DegenerateMotionError(CalibrationError):
    """Rotation axes do not span 3D; hand-eye rotation unobservable."""

    code = "degenerate-motion"


class UnobservableTranslationError(CalibrationError):
    """Stacked translation/scale system is rank deficient."""

    code = "unobservable-translation"


class ScaleSignError(CalibrationError):
    """Recovered monocular scale is not strictly positive."""

    code = "scale-sign"


class LowParallaxError(CalibrationError):
    """Triangulation rays nearly parallel; point depth ill-defined."""

    code = "low-parallax"


class CheiralityError(CalibrationError):
    """Triangulated point lies behind the observing cameras."""

    code = "cheirality"


class NoConstraintsError(CalibrationError):
    """Every residual was invalid; nothing to optimize."""

    code = "no-constraints"


class UnobservableCoreError(CalibrationError):
    """Marginalized core system is singular.

    ``null_direction`` holds the unit vector of the unconstrained core
    direction (e.g. the time-lag axis on a stationary trajectory).
    """

    code = "unobservable-core"

    def __init__(self, message: str, null_direction=None, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.null_direction = null_direction


class SpanExclusionError(CalibrationError):
    """Too many observations pushed outside the trajectory span."""

    code = "span-exclusion"


class NonConvergenceError(CalibrationError):
    """Optimization diverged; ``best`` carries the best state found."""

    code = "non-convergence"

    def __init__(self, message: str, best=None, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.best = best


class ScenarioInfeasibleError(CalibrationError):
    """Simulated scenario leaves the camera starved of landmarks."""

    code = "scenario-infeasible"


class FileFormatError(Exception):
    """Malformed input file; reports path and 1-based line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line
