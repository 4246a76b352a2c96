"""Coarse stage: rough time sync plus closed-form hand-eye calibration.

Relative motions of the two sensors are tied by the hand-eye constraint
``A X = X B`` with ``X`` the LiDAR-from-camera extrinsic. The rotation comes
from aligning the canonical rotation vectors of the paired relative motions
(covariance + SVD), the translation and the monocular scale from one stacked
linear system. Clocks are pre-aligned by detecting when the rig starts moving
in each sensor's own motion signal.

All functions are pure; inputs are immutable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    CalibrationError,
    DegenerateMotionError,
    InsufficientExcitationError,
    OnsetNotFoundError,
    OutOfRangeError,
    ScaleSignError,
    UnobservableTranslationError,
)
from .geometry import (
    ContinuousTrajectory,
    Pose,
    Rotation,
    StampedPose,
    project_to_rotation,
    relative_pose,
)

logger = logging.getLogger(__name__)

# Relative rotations outside this angle window are useless for the hand-eye
# solve: too small is noise, too close to pi has an ambiguous axis.
MIN_PAIR_ANGLE = 1e-3
MAX_PAIR_ANGLE = np.pi - 1e-3


@dataclass(frozen=True)
class MotionSignal:
    """Scalar motion magnitude per timestamp.

    Units depend on the source: rad/s for trajectory rotation rate,
    pixels/frame for mean 2D feature displacement.
    """

    timestamps: np.ndarray
    magnitudes: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        mag = np.asarray(self.magnitudes, dtype=float)
        if ts.shape != mag.shape or ts.ndim != 1:
            raise ValueError("timestamps and magnitudes must be equal-length 1D")
        if len(ts) and np.any(np.diff(ts) <= 0.0):
            raise ValueError("signal timestamps must be strictly increasing")
        if np.any(mag < 0.0) or not np.all(np.isfinite(mag)):
            raise ValueError("magnitudes must be finite and non-negative")
        ts.flags.writeable = False
        mag.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "magnitudes", mag)

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class RelativePosePair:
    """Paired relative motions of the two sensors over one time span.

    ``camera_rel`` carries the raw monocular translation, known only up to
    the global scale recovered later.
    """

    lidar_rel: Pose
    camera_rel: Pose
    span: tuple

    def __post_init__(self):
        for name, pose in (("lidar", self.lidar_rel), ("camera", self.camera_rel)):
            angle = pose.rotation.angle
            if not (MIN_PAIR_ANGLE < angle < MAX_PAIR_ANGLE):
                raise ValueError(
                    f"{name} relative rotation angle {angle:.6f} rad outside "
                    f"({MIN_PAIR_ANGLE:g}, pi - {np.pi - MAX_PAIR_ANGLE:g})")


@dataclass(frozen=True)
class CoarseConditioning:
    """Smallest/largest singular values of the two linear solves."""

    rotation_sv_min: float
    rotation_sv_max: float
    translation_sv_min: float
    translation_sv_max: float

    @property
    def rotation_ratio(self) -> float:
        return self.rotation_sv_min / self.rotation_sv_max

    @property
    def translation_ratio(self) -> float:
        return self.translation_sv_min / self.translation_sv_max


@dataclass(frozen=True)
class CoarseResult:
    """Closed-form estimate: LiDAR-from-camera pose, scale, clock offset."""

    extrinsic: Pose
    scale: float
    time_offset: float
    conditioning: CoarseConditioning | None = None
    pair_count: int = 0
    onset_lidar: float | None = None
    onset_camera: float | None = None

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class CoarseConfig:
    lidar_onset_threshold: float = 0.15   # rad/s
    lidar_onset_hold: int = 5             # samples
    camera_onset_threshold: float = 2.0   # px/frame
    camera_onset_hold: int = 5            # frames
    pair_count: int = 10
    min_pair_angle: float = 0.17          # rad, ~10 deg per pair
    total_excursion_target: float = 0.44  # rad, ~25 deg across the window


def detect_motion_onset(signal: MotionSignal, threshold: float, hold: int) -> float:
    """Timestamp of the first sample exceeding ``threshold`` for ``hold`` samples."""
    if hold < 1:
        raise ValueError("hold must be >= 1")
    n = len(signal)
    if n < hold:
        raise OnsetNotFoundError(
            f"signal has {n} samples, fewer than hold={hold}")
    above = signal.magnitudes > threshold
    if hold == 1:
        idx = np.flatnonzero(above)
    else:
        window = np.convolve(above.astype(int), np.ones(hold, dtype=int), "valid")
        idx = np.flatnonzero(window == hold)
    if len(idx) == 0:
        raise OnsetNotFoundError(
            f"no sample stays above {threshold:g} for {hold} consecutive samples")
    return float(signal.timestamps[idx[0]])


def rotation_rate_signal(traj: ContinuousTrajectory) -> MotionSignal:
    """Rotation speed (rad/s) between consecutive knots, stamped at the left knot."""
    angles = np.array([relative_pose(traj.poses[i], traj.poses[i + 1]).rotation.angle
                       for i in range(len(traj) - 1)])
    rates = angles / np.diff(traj.times)
    return MotionSignal(traj.times[:-1].copy(), rates)


def rotation_rate_from_poses(poses: Sequence[StampedPose]) -> MotionSignal:
    """Rotation speed between consecutive stamped poses."""
    if len(poses) < 2:
        raise OnsetNotFoundError("need at least 2 poses for a motion signal")
    ts = np.array([p.timestamp for p in poses])
    angles = np.array([relative_pose(poses[i].pose, poses[i + 1].pose).rotation.angle
                       for i in range(len(poses) - 1)])
    return MotionSignal(ts[:-1], angles / np.diff(ts))


def feature_displacement_signal(tracks) -> MotionSignal:
    """Mean 2D feature displacement (px/frame) between consecutive frames.

    ``tracks`` are feature tracks exposing ``frame_ids``, ``times`` and
    ``pixels``. Frame pairs that share no track are skipped. Samples are
    stamped at the earlier frame.
    """
    frame_time = {}
    frame_obs = {}
    for t in tracks:
        for fid, ft, px in zip(t.frame_ids, t.times, t.pixels):
            frame_time[int(fid)] = float(ft)
            frame_obs.setdefault(int(fid), {})[t.landmark_id] = px
    if len(frame_time) < 2:
        raise OnsetNotFoundError("tracks cover fewer than 2 frames")
    order = sorted(frame_time, key=frame_time.get)
    ts, mags = [], []
    for f0, f1 in zip(order[:-1], order[1:]):
        obs0, obs1 = frame_obs[f0], frame_obs[f1]
        common = obs0.keys() & obs1.keys()
        if not common:
            continue
        disp = np.array([obs1[k] - obs0[k] for k in sorted(common)])
        ts.append(frame_time[f0])
        mags.append(float(np.mean(np.linalg.norm(disp, axis=1))))
    if len(ts) < 1:
        raise OnsetNotFoundError("no consecutive frames share feature tracks")
    return MotionSignal(np.array(ts), np.array(mags))


def rough_sync(lidar_traj: ContinuousTrajectory, camera_signal: MotionSignal,
               config: CoarseConfig | None = None) -> float:
    """Clock offset mapping camera stamps to the LiDAR clock.

    Detects when the rig starts moving in the LiDAR rotation-rate signal and
    in the camera feature-displacement signal; the returned additive offset
    satisfies ``t_lidar = t_camera + offset``. Constant offset only, no skew.
    """
    cfg = config or CoarseConfig()
    onset_l = detect_motion_onset(rotation_rate_signal(lidar_traj),
                                  cfg.lidar_onset_threshold, cfg.lidar_onset_hold)
    onset_c = detect_motion_onset(camera_signal,
                                  cfg.camera_onset_threshold, cfg.camera_onset_hold)
    return onset_l - onset_c


def extract_pairs(lidar_traj: ContinuousTrajectory,
                  camera_poses: Sequence[StampedPose],
                  count: int = 10,
                  min_angle: float = 0.17) -> list:
    """Relative-pose pairs between evenly subsampled camera keyframes.

    Camera timestamps must already be on the LiDAR clock and inside the knot
    span; the LiDAR relative pose is interpolated at the two camera stamps.
    Pairs are consecutive in the keyframe subsampling (non-nested spans) and
    must show at least ``min_angle`` of rotation in both sensors.
    """
    if len(camera_poses) < 2:
        raise InsufficientExcitationError(
            f"need at least 2 camera poses, got {len(camera_poses)}")
    t0, t1 = lidar_traj.span
    for p in camera_poses:
        if not (t0 <= p.timestamp <= t1):
            raise OutOfRangeError(
                f"camera stamp {p.timestamp:.6f} s outside LiDAR span "
                f"[{t0:.6f}, {t1:.6f}]; apply the sync offset and trim first")
    n = len(camera_poses)
    sel = np.unique(np.round(np.linspace(0, n - 1, count + 1)).astype(int))
    pairs = []
    max_angle_seen = 0.0
    for ia, ib in zip(sel[:-1], sel[1:]):
        a, b = camera_poses[ia], camera_poses[ib]
        cam_rel = relative_pose(a.pose, b.pose)
        lid_rel = relative_pose(lidar_traj.interpolate(a.timestamp),
                                lidar_traj.interpolate(b.timestamp))
        ang_c, ang_l = cam_rel.rotation.angle, lid_rel.rotation.angle
        max_angle_seen = max(max_angle_seen, ang_l)
        if not (min_angle <= ang_c < MAX_PAIR_ANGLE):
            continue
        if not (min_angle <= ang_l < MAX_PAIR_ANGLE):
            continue
        pairs.append(RelativePosePair(lid_rel, cam_rel,
                                      (a.timestamp, b.timestamp)))
    if len(pairs) < 3:
        raise InsufficientExcitationError(
            f"only {len(pairs)} of {len(sel) - 1} candidate pairs reach "
            f"{min_angle:g} rad of rotation (max seen {max_angle_seen:.4f}); "
            "insufficient rotational excitation: add roll/pitch/yaw motion")
    if len(pairs) == 3:
        logger.warning("only 3 relative pose pairs qualify; solution will be "
                       "poorly conditioned, 4 or more are recommended")
    return pairs


def _rotation_vectors(pairs):
    r_l = np.array([p.lidar_rel.rotation.rotvec() for p in pairs])
    r_c = np.array([p.camera_rel.rotation.rotvec() for p in pairs])
    return r_l, r_c


def _rotation_covariance(r_l, r_c) -> np.ndarray:
    return r_l.T @ r_c


def solve_rotation(pairs: Sequence[RelativePosePair]) -> Rotation:
    """Extrinsic rotation from paired relative motions.

    Aligns the canonical rotation vectors of the LiDAR and camera relative
    motions through the covariance ``M = sum r_L r_C^T`` and its inverse
    square root, then projects to the nearest rotation. The result ``R``
    satisfies ``R_L R = R R_C`` in the least-squares sense. Raises when all
    rotation axes are (nearly) parallel, which leaves ``R`` undetermined.
    """
    if len(pairs) < 3:
        raise InsufficientExcitationError(
            f"rotation solve needs at least 3 pairs, got {len(pairs)}")
    r_l, r_c = _rotation_vectors(pairs)
    m = _rotation_covariance(r_l, r_c)
    svals = np.linalg.svd(m, compute_uv=False)
    if svals[-1] < 1e-6 * svals[0]:
        raise DegenerateMotionError(
            f"rotation axes span less than 3D (singular values {svals}); "
            "single-axis motion cannot determine the extrinsic rotation")
    w, q = np.linalg.eigh(m.T @ m)
    w = np.maximum(w, 1e-12)
    inv_sqrt = q @ np.diag(1.0 / np.sqrt(w)) @ q.T
    # (M^T M)^(-1/2) M^T recovers the camera-from-LiDAR rotation for this
    # covariance ordering; the extrinsic convention here is its inverse.
    return project_to_rotation(inv_sqrt @ m.T).inverse()


def _stack_translation_system(pairs, rotation: Rotation):
    r = rotation.matrix
    k = len(pairs)
    a = np.zeros((3 * k, 4))
    b = np.zeros(3 * k)
    for i, p in enumerate(pairs):
        a[3 * i:3 * i + 3, :3] = np.eye(3) - p.lidar_rel.rotation.matrix
        a[3 * i:3 * i + 3, 3] = r @ p.camera_rel.translation
        b[3 * i:3 * i + 3] = p.lidar_rel.translation
    return a, b


def solve_translation_scale(pairs: Sequence[RelativePosePair],
                            rotation: Rotation):
    """Extrinsic translation (m) and monocular scale from the stacked system.

    Solves ``[(I - R_L) | R t_C] [t; lambda] = t_L`` over all pairs by
    column-scaled QR least squares.
    """
    if len(pairs) < 2:
        raise UnobservableTranslationError(
            f"translation solve needs at least 2 pairs, got {len(pairs)}")
    a, b = _stack_translation_system(pairs, rotation)
    col_scale = np.linalg.norm(a, axis=0)
    col_scale[col_scale == 0.0] = 1.0
    a_scaled = a / col_scale
    svals = np.linalg.svd(a_scaled, compute_uv=False)
    if svals[-1] < 1e-8 * svals[0]:
        raise UnobservableTranslationError(
            f"stacked translation system is rank deficient "
            f"(singular values {svals}); motion does not constrain "
            "translation and scale")
    x, *_ = scipy.linalg.lstsq(a_scaled, b, lapack_driver="gelsy")
    x = x / col_scale
    t, lam = x[:3], float(x[3])
    if lam <= 0.0:
        raise ScaleSignError(
            f"recovered monocular scale {lam:.6g} is not positive; "
            "trajectories are mismatched or the sync offset is wrong")
    return t, lam


def coarse_calibrate(lidar_traj: ContinuousTrajectory,
                     camera_poses: Sequence[StampedPose],
                     config: CoarseConfig | None = None,
                     camera_signal: MotionSignal | None = None,
                     time_offset: float | None = None) -> CoarseResult:
    """Full coarse pipeline: sync, pair extraction, closed-form solves.

    ``camera_signal`` should be the feature-displacement signal when tracks
    are available; otherwise the camera pose rotation rate is used with the
    LiDAR onset threshold. Passing ``time_offset`` skips onset detection and
    forces that sync correction (used by robustness sweeps).
    """
    cfg = config or CoarseConfig()
    onset_l = onset_c = None
    if time_offset is None:
        try:
            onset_l = detect_motion_onset(rotation_rate_signal(lidar_traj),
                                          cfg.lidar_onset_threshold,
                                          cfg.lidar_onset_hold)
            if camera_signal is not None:
                onset_c = detect_motion_onset(camera_signal,
                                              cfg.camera_onset_threshold,
                                              cfg.camera_onset_hold)
            else:
                onset_c = detect_motion_onset(
                    rotation_rate_from_poses(camera_poses),
                    cfg.lidar_onset_threshold, cfg.camera_onset_hold)
        except CalibrationError as e:
            e.stage = "rough_sync"
            raise
        delta = onset_l - onset_c
    else:
        delta = float(time_offset)

    t0, t1 = lidar_traj.span
    window_start = onset_l if onset_l is not None else t0
    corrected = [StampedPose(p.timestamp + delta, p.pose) for p in camera_poses
                 if t0 <= p.timestamp + delta <= t1
                 and p.timestamp + delta >= window_start]
    if len(corrected) < 2:
        raise InsufficientExcitationError(
            f"only {len(corrected)} camera poses fall inside the LiDAR span "
            f"after applying sync offset {delta:.3f} s", stage="extract_pairs")

    try:
        pairs = extract_pairs(lidar_traj, corrected,
                              count=cfg.pair_count,
                              min_angle=cfg.min_pair_angle)
    except CalibrationError as e:
        e.stage = "extract_pairs"
        raise

    r_l, r_c = _rotation_vectors(pairs)
    excursion = float(np.max(np.linalg.norm(r_l, axis=1)))
    if excursion < cfg.total_excursion_target:
        logger.warning("largest pair rotation is %.3f rad, below the %.2f rad "
                       "target; expect a noisy coarse rotation",
                       excursion, cfg.total_excursion_target)

    try:
        rotation = solve_rotation(pairs)
    except CalibrationError as e:
        e.stage = "solve_rotation"
        raise
    try:
        t, lam = solve_translation_scale(pairs, rotation)
    except CalibrationError as e:
        e.stage = "solve_translation_scale"
        raise

    rot_svals = np.linalg.svd(_rotation_covariance(r_l, r_c), compute_uv=False)
    a, _ = _stack_translation_system(pairs, rotation)
    col_scale = np.linalg.norm(a, axis=0)
    col_scale[col_scale == 0.0] = 1.0
    tr_svals = np.linalg.svd(a / col_scale, compute_uv=False)
    conditioning = CoarseConditioning(
        rotation_sv_min=float(rot_svals[-1]), rotation_sv_max=float(rot_svals[0]),
        translation_sv_min=float(tr_svals[-1]), translation_sv_max=float(tr_svals[0]))

    return CoarseResult(extrinsic=Pose(rotation, t), scale=lam,
                        time_offset=delta, conditioning=conditioning,
                        pair_count=len(pairs),
                        onset_lidar=onset_l, onset_camera=onset_c)
