"""Synthetic rig simulator and error metrics.

Generates a LiDAR knot trajectory, camera poses derived through a ground-truth
extrinsic and clock lag, and pixel tracks of random landmarks through a
pinhole camera. The continuous-time ground truth IS the knot interpolation:
camera poses are sampled from the interpolated trajectory, so a perfect
estimator can reach machine precision. The camera's own odometry frame is
offset by a random rigid transform and its translations carry an arbitrary
positive scale, reproducing monocular visual odometry.

All generation is deterministic under a fixed seed; batch sweeps derive
per-trial seeds from the master seed, so trials could run in parallel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .coarse import CoarseResult, RelativePosePair, coarse_calibrate, solve_rotation
from .errors import ScenarioInfeasibleError
from .geometry import (
    ContinuousTrajectory,
    Pose,
    Rotation,
    StampedPose,
    rotation_geodesic_distance,
)
from .refine import (
    CameraFrame,
    CameraIntrinsics,
    FeatureTrack,
    RefineConfig,
    refine_calibration,
)

logger = logging.getLogger(__name__)

PROFILES = ("handheld-sinusoid", "arc", "stationary-then-move")

# Handheld excitation: sinusoids on every twist axis. Amplitudes and the
# period band put angular/linear speeds near 0.7 rad/s and 0.9 m/s.
HANDHELD_ROT_AMP = 0.3     # rad
HANDHELD_TRANS_AMP = 0.5   # m
HANDHELD_PERIODS = (2.0, 7.0)
ONSET_RAMP = 0.25          # s, smooth start of the moving phase

# Initial-guess perturbation for refinement-only experiments, matching the
# expected closed-form error level.
INIT_ROT_SIGMA = 0.05      # rad
INIT_TRANS_SIGMA = 0.05    # m


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=700.0, fy=700.0, cx=640.0, cy=360.0,
                            width=1280, height=720)


@dataclass(frozen=True)
class Scenario:
    """Everything that defines one synthetic dataset."""

    profile: str = "handheld-sinusoid"
    duration: float = 10.0
    lidar_rate: float = 100.0
    camera_rate: float = 20.0
    extrinsic: Pose | None = None      # LiDAR-from-camera; None draws randomly
    lag: float = 0.0                   # s, camera stamp + lag = LiDAR stamp
    pixel_noise: float = 5.0           # px, sigma per axis
    rotation_noise: float = 0.0        # rad, sigma on camera pose rotations
    landmark_count: int = 300
    landmark_radius: float = 20.0      # m
    landmark_min_radius: float = 1.0   # m
    onset_time: float = 2.5            # s, stationary-then-move only
    motion_scale: float = 1.0
    rot_amplitude: float = HANDHELD_ROT_AMP      # rad
    trans_amplitude: float = HANDHELD_TRANS_AMP  # m
    period_band: tuple = HANDHELD_PERIODS        # s
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; "
                             f"choose one of {PROFILES}")
        if self.duration <= 0.0 or self.lidar_rate <= 0.0 or self.camera_rate <= 0.0:
            raise ValueError("duration and rates must be positive")


@dataclass(frozen=True)
class GroundTruth:
    extrinsic: Pose          # LiDAR-from-camera
    lag: float
    scale: float             # metric translation = scale * reported translation
    world_offset: Pose       # camera odometry frame w.r.t. LiDAR world
    onset_time: float | None


@dataclass(frozen=True)
class SimulatedDataset:
    lidar_traj: ContinuousTrajectory
    camera_poses: list        # StampedPose, odometry frame, scaled translations
    frames: list              # CameraFrame on the camera clock
    tracks: list              # FeatureTrack
    intrinsics: CameraIntrinsics
    truth: GroundTruth
    scenario: Scenario


def random_extrinsic(rng) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.1, 2.5)
    return Pose(Rotation.from_rotvec(angle * axis), rng.uniform(-0.5, 0.5, size=3))


def perturb_pose(pose: Pose, rot_sigma: float, trans_sigma: float, rng) -> Pose:
    return Pose(pose.rotation @ Rotation.from_rotvec(rng.normal(0.0, rot_sigma, 3)),
                pose.translation + rng.normal(0.0, trans_sigma, 3))


def _sinusoid_params(rng, scenario: Scenario):
    amps = np.concatenate([np.full(3, scenario.rot_amplitude),
                           np.full(3, scenario.trans_amplitude)])
    amps = amps * scenario.motion_scale
    periods = rng.uniform(*scenario.period_band, size=6)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=6)
    return amps, periods, phases


def _sinusoid_value(t, amps, periods, phases):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    arg = 2.0 * np.pi * t[:, None] / periods[None, :] + phases[None, :]
    return amps[None, :] * np.sin(arg)


def _handheld_params(rng, scenario: Scenario, dt):
    """Sinusoid parameters with guaranteed motion right from t = 0.

    Resamples phases until the discrete rotation-rate signal clears the
    onset-detector threshold with margin for the first half second, so onset
    detection triggers on the very first sample.
    """
    peak = scenario.rot_amplitude * scenario.motion_scale \
        * 2.0 * np.pi / scenario.period_band[0]
    floor = max(min(0.2, 0.5 * peak), 0.02)
    grid = np.arange(0.0, 0.5 + dt, dt)
    for _ in range(500):
        amps, periods, phases = _sinusoid_params(rng, scenario)
        vals = _sinusoid_value(grid, amps, periods, phases)[:, :3]
        rots = [Rotation.from_rotvec(v) for v in vals]
        rates = np.array([rotation_geodesic_distance(rots[i], rots[i + 1]) / dt
                          for i in range(len(rots) - 1)])
        if np.min(rates) >= floor:
            return amps, periods, phases
    raise RuntimeError("could not draw a handheld profile with early motion")


def _profile_pose_fn(scenario: Scenario, rng):
    dt = 1.0 / scenario.lidar_rate
    if scenario.profile == "handheld-sinusoid":
        amps, periods, phases = _handheld_params(rng, scenario, dt)

        def pose_at(t):
            v = _sinusoid_value(t, amps, periods, phases)[0]
            return Pose(Rotation.from_rotvec(v[:3]), v[3:])

        return pose_at

    if scenario.profile == "arc":
        yaw_rate = 0.3 * scenario.motion_scale
        radius = 5.0

        def pose_at(t):
            yaw = yaw_rate * t
            pos = radius * np.array([np.sin(yaw), 1.0 - np.cos(yaw), 0.0])
            return Pose(Rotation.from_rotvec([0.0, 0.0, yaw]), pos)

        return pose_at

    # stationary-then-move: identity until onset, then a smoothly ramped
    # handheld motion (strong excitation right after the ramp).
    amps, periods, phases = _handheld_params(rng, scenario, dt)
    onset = scenario.onset_time

    def pose_at(t):
        if t <= onset:
            return Pose.identity()
        rel = t - onset
        ramp = min(rel / ONSET_RAMP, 1.0) ** 2
        v = ramp * _sinusoid_value(rel, amps, periods, phases)[0]
        return Pose(Rotation.from_rotvec(v[:3]), v[3:])

    return pose_at


def generate_scenario(scenario: Scenario) -> SimulatedDataset:
    """Build one deterministic synthetic dataset from a scenario."""
    rng = np.random.default_rng(scenario.seed)
    intrinsics = default_intrinsics()
    extrinsic = scenario.extrinsic or random_extrinsic(rng)

    pose_at = _profile_pose_fn(scenario, rng)
    n_knots = int(round(scenario.duration * scenario.lidar_rate)) + 1
    knot_times = np.arange(n_knots) / scenario.lidar_rate
    lidar_traj = ContinuousTrajectory(
        [StampedPose(float(t), pose_at(float(t))) for t in knot_times],
        clock_id="lidar")

    t0, t1 = lidar_traj.span
    n_frames = int(math.floor(scenario.duration * scenario.camera_rate)) + 1
    cam_times = np.arange(n_frames) / scenario.camera_rate
    cam_times = cam_times[(cam_times + scenario.lag >= t0)
                          & (cam_times + scenario.lag <= t1)]
    frames = [CameraFrame(i, float(t)) for i, t in enumerate(cam_times)]

    # Metric camera poses in the LiDAR world, through the true lag.
    metric = [lidar_traj.interpolate(float(t + scenario.lag)) @ extrinsic
              for t in cam_times]

    # Landmarks: volume-uniform in a ball around the trajectory, hollow core.
    center = np.mean([p.translation for p in lidar_traj.poses], axis=0)
    landmarks = np.zeros((scenario.landmark_count, 3))
    count = 0
    while count < scenario.landmark_count:
        need = scenario.landmark_count - count
        dirs = rng.normal(size=(need, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radii = scenario.landmark_radius * rng.uniform(0.0, 1.0, size=need) ** (1.0 / 3.0)
        keep = radii >= scenario.landmark_min_radius
        pts = center + dirs[keep] * radii[keep, None]
        landmarks[count:count + len(pts)] = pts
        count += len(pts)

    # Project through the metric poses; tracks get pixel noise.
    obs_per_landmark = [[] for _ in range(scenario.landmark_count)]
    starved_frames = 0
    for frame, pose_wc in zip(frames, metric):
        p_c = pose_wc.inverse().apply(landmarks)
        depth_ok = p_c[:, 2] > 0.5
        px = np.full((scenario.landmark_count, 2), np.nan)
        px[depth_ok] = intrinsics.project(p_c[depth_ok])
        visible = depth_ok & np.isfinite(px[:, 0]) & intrinsics.in_view(px)
        noise = rng.normal(0.0, scenario.pixel_noise,
                           size=(scenario.landmark_count, 2))
        if int(np.sum(visible)) < 2:
            starved_frames += 1
        for j in np.flatnonzero(visible):
            obs_per_landmark[j].append(
                (frame.frame_id, frame.timestamp, px[j] + noise[j]))
    if len(frames) == 0 or starved_frames > 0.5 * len(frames):
        raise ScenarioInfeasibleError(
            f"{starved_frames}/{len(frames)} frames see fewer than 2 "
            "landmarks; adjust the trajectory or landmark distribution")

    tracks = []
    for j, obs in enumerate(obs_per_landmark):
        if len(obs) < 2:
            continue
        fids = np.array([o[0] for o in obs])
        times = np.array([o[1] for o in obs])
        pixels = np.array([o[2] for o in obs])
        tracks.append(FeatureTrack(j, fids, times, pixels))

    # Camera odometry: random world frame, scaled translation, optional
    # rotation noise.
    world_offset = Pose(Rotation.from_rotvec(rng.uniform(-1.0, 1.0, 3)),
                        rng.uniform(-10.0, 10.0, 3))
    mono_scale = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    camera_poses = []
    for t, pose_wc in zip(cam_times, metric):
        vo = world_offset @ pose_wc
        rot = vo.rotation
        if scenario.rotation_noise > 0.0:
            rot = rot @ Rotation.from_rotvec(
                rng.normal(0.0, scenario.rotation_noise, 3))
        camera_poses.append(
            StampedPose(float(t), Pose(rot, mono_scale * vo.translation)))

    truth = GroundTruth(extrinsic=extrinsic, lag=scenario.lag,
                        scale=1.0 / mono_scale, world_offset=world_offset,
                        onset_time=(scenario.onset_time
                                    if scenario.profile == "stationary-then-move"
                                    else None))
    return SimulatedDataset(lidar_traj, camera_poses, frames, tracks,
                            intrinsics, truth, scenario)


@dataclass(frozen=True)
class ErrorReport:
    """Per-trial errors plus their means and variances.

    ``e_r`` is the rotation geodesic error (rad), ``e_t`` the translation
    error norm (m), ``e_tau`` the signed lag error (s).
    """

    e_r: np.ndarray
    e_t: np.ndarray
    e_tau: np.ndarray

    @property
    def mean_e_r(self) -> float:
        return float(np.mean(self.e_r))

    @property
    def mean_e_t(self) -> float:
        return float(np.mean(self.e_t))

    @property
    def mean_e_tau(self) -> float:
        return float(np.mean(self.e_tau))

    @property
    def mean_abs_e_tau(self) -> float:
        return float(np.mean(np.abs(self.e_tau)))

    @property
    def var_e_r(self) -> float:
        return float(np.var(self.e_r))

    @property
    def var_e_t(self) -> float:
        return float(np.var(self.e_t))

    @property
    def var_e_tau(self) -> float:
        return float(np.var(self.e_tau))

    @staticmethod
    def combine(reports: Sequence["ErrorReport"]) -> "ErrorReport":
        return ErrorReport(np.concatenate([r.e_r for r in reports]),
                           np.concatenate([r.e_t for r in reports]),
                           np.concatenate([r.e_tau for r in reports]))

    def __len__(self):
        return len(self.e_r)

    def table_row(self) -> str:
        """Mean (variance) per metric, rotation in 1e-3 rad, lag in ms."""
        return (f"e_r {1e3 * self.mean_e_r:.2f} ({1e3 * np.var(self.e_r * 1e3) / 1e3:.2f})  "
                f"e_t {self.mean_e_t:.3f} ({self.var_e_t:.3f})  "
                f"e_tau {1e3 * self.mean_e_tau:.2f} ({np.var(self.e_tau * 1e3):.2f})")


def evaluate(extrinsic: Pose, tau, truth: GroundTruth) -> ErrorReport:
    """Single-trial errors against ground truth."""
    e_r = rotation_geodesic_distance(extrinsic.rotation, truth.extrinsic.rotation)
    e_t = float(np.linalg.norm(extrinsic.translation - truth.extrinsic.translation))
    e_tau = float(tau - truth.lag) if tau is not None else float("nan")
    return ErrorReport(np.array([e_r]), np.array([e_t]), np.array([e_tau]))


# --- experiment sweeps -----------------------------------------------------


def _trial_seeds(seed: int, n: int):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def synthetic_pairs(rng, level_rad: float, count: int, noise: float,
                    extrinsic: Pose):
    """Hand-eye pairs with a fixed rotation magnitude and optional noise.

    Rotation-vector noise of the given sigma is added independently to both
    sensors' canonical vectors, mimicking odometry noise.
    """
    pairs = []
    x = extrinsic
    for _ in range(count):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        r_l = level_rad * axis
        t_l = rng.normal(0.0, 0.3, 3)
        lidar_rel = Pose(Rotation.from_rotvec(r_l), t_l)
        cam_rel = x.inverse() @ lidar_rel @ x
        r_c = cam_rel.rotation.rotvec()
        r_l_noisy = r_l + rng.normal(0.0, noise, 3) if noise > 0 else r_l
        r_c_noisy = r_c + rng.normal(0.0, noise, 3) if noise > 0 else r_c
        pairs.append(RelativePosePair(
            Pose(Rotation.from_rotvec(r_l_noisy), t_l),
            Pose(Rotation.from_rotvec(r_c_noisy), cam_rel.translation),
            (0.0, 1.0)))
    return pairs


def sweep_motion_excitation(levels_deg: Sequence[float],
                            samples: Sequence[int] = (10,),
                            noise_levels: Sequence[float] = (0.0, 0.01),
                            trials: int = 50,
                            seed: int = 0) -> list:
    """Mean closed-form rotation error per (motion level, count, noise) cell."""
    rows = []
    for level in levels_deg:
        for count in samples:
            for noise in noise_levels:
                seeds = _trial_seeds(seed + hash((level, count, noise)) % 10000,
                                     trials)
                errs = []
                for s in seeds:
                    rng = np.random.default_rng(s)
                    x = random_extrinsic(rng)
                    pairs = synthetic_pairs(rng, math.radians(level), count,
                                            noise, x)
                    r = solve_rotation(pairs)
                    errs.append(rotation_geodesic_distance(r, x.rotation))
                rows.append({"level_deg": float(level), "samples": int(count),
                             "noise": float(noise), "trials": trials,
                             "mean_rotation_error": float(np.mean(errs))})
    return rows


def run_refine_trial(scenario: Scenario, keyframes: int, init_seed: int,
                     config: RefineConfig | None = None) -> ErrorReport:
    """Refinement-only trial from a perturbed ground-truth initial guess."""
    data = generate_scenario(scenario)
    rng = np.random.default_rng(init_seed)
    init = perturb_pose(data.truth.extrinsic, INIT_ROT_SIGMA, INIT_TRANS_SIGMA, rng)
    coarse0 = CoarseResult(extrinsic=init, scale=1.0, time_offset=0.0)
    cfg = replace(config or RefineConfig(), keyframes=keyframes)
    result = refine_calibration(coarse0, data.frames, data.tracks,
                                data.lidar_traj, data.intrinsics, cfg)
    return evaluate(result.extrinsic, result.tau, data.truth)


def sweep_frames(frame_counts: Sequence[int] = (10, 20, 30, 50),
                 trials: int = 50, seed: int = 0,
                 scenario: Scenario | None = None,
                 config: RefineConfig | None = None) -> list:
    """Refinement accuracy versus the number of keyframes used."""
    base = scenario or Scenario()
    rows = []
    seeds = _trial_seeds(seed, trials)
    for count in frame_counts:
        reports = []
        for k, s in enumerate(seeds):
            rng = np.random.default_rng(s)
            lag = rng.uniform(-0.01, 0.01)
            sc = replace(base, seed=s, lag=float(lag))
            reports.append(run_refine_trial(sc, count, s + 1, config))
        rep = ErrorReport.combine(reports)
        rows.append({"frames": int(count), "trials": trials,
                     "e_r_mean": rep.mean_e_r, "e_r_var": rep.var_e_r,
                     "e_t_mean": rep.mean_e_t, "e_t_var": rep.var_e_t,
                     "e_tau_mean": rep.mean_abs_e_tau, "e_tau_var": rep.var_e_tau})
    return rows


def sweep_lag_coarse(lags: Sequence[float] = (-0.5, -0.3, -0.1, 0.1, 0.3, 0.5),
                     trials: int = 10, seed: int = 0,
                     scenario: Scenario | None = None) -> list:
    """Closed-form accuracy under an injected synchronization error.

    The forced sync offset equals the injected lag error (the scenario itself
    has no lag), so pairs are extracted from misaligned timestamps.
    """
    base = scenario or Scenario()
    rows = []
    seeds = _trial_seeds(seed, trials)
    for lag in lags:
        reports = []
        for s in seeds:
            sc = replace(base, seed=s, lag=0.0)
            data = generate_scenario(sc)
            res = coarse_calibrate(data.lidar_traj, data.camera_poses,
                                   time_offset=float(lag))
            reports.append(evaluate(res.extrinsic, None, data.truth))
        rep = ErrorReport.combine(reports)
        rows.append({"lag": float(lag), "trials": trials,
                     "e_r_mean": rep.mean_e_r, "e_t_mean": rep.mean_e_t})
    return rows


def sweep_lag_refine(lags: Sequence[float] = (0.033, 0.066, 0.099, 0.133),
                     trials: int = 10, seed: int = 0,
                     keyframes: int = 30,
                     config: RefineConfig | None = None) -> list:
    """Lag recovery on short 30 fps segments, refinement only.

    The initial lag guess is zero while the true lag is injected, so stage A
    must absorb the whole offset. Includes a zero-lag reference row.
    """
    rows = []
    seeds = _trial_seeds(seed, trials)
    for lag in [0.0, *lags]:
        reports = []
        for s in seeds:
            sc = Scenario(duration=3.0, camera_rate=30.0, lag=float(lag), seed=s)
            reports.append(run_refine_trial(sc, keyframes, s + 1, config))
        rep = ErrorReport.combine(reports)
        rows.append({"lag": float(lag), "trials": trials,
                     "e_r_mean": rep.mean_e_r, "e_t_mean": rep.mean_e_t,
                     "e_tau_mean": rep.mean_e_tau,
                     "e_tau_abs_mean": rep.mean_abs_e_tau})
    return rows
