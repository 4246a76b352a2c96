"""Structureless continuous-time refinement of extrinsics and time lag.

Minimizes robust reprojection error over the camera-from-LiDAR twist ``xi``
and the LiDAR time lag ``tau``. For a feature observed at camera stamp ``t``
the predicted pixel is ``pi(T_CL * T_LW(t + tau) * p_w)`` where ``T_LW`` is
the inverse of the interpolated world-from-LiDAR pose. Landmarks are
re-triangulated from the current state every iteration and eliminated from
the normal equations by the Schur complement, so the solved core stays at
7 dimensions (6 extrinsic + 1 lag). A lag-only mode removes the extrinsic
from the state as well, freezing it and updating only ``tau``.

Residual and Jacobian accumulation uses a fixed (frame, track) ordering and
sequential reductions, so repeated runs are bit-identical; evaluation across
tracks could be parallelized as long as that reduction order is preserved.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import coarse as coarse_mod
from .errors import (
    CalibrationError,
    CheiralityError,
    LowParallaxError,
    NoConstraintsError,
    NonConvergenceError,
    SpanExclusionError,
    UnobservableCoreError,
)
from .geometry import (
    ContinuousTrajectory,
    Pose,
    StampedPose,
    exp_map,
    skew,
)

logger = logging.getLogger(__name__)

CORE_DIM = 7            # 6 extrinsic twist + 1 time lag
MIN_DEPTH = 1e-6        # meters; at or below counts as behind the camera
_SINGULAR_REL_TOL = 1e-12
# Re-triangulating the structure each evaluation gives the composite cost a
# noise floor; proposals regressing by no more than this (relative) at the
# last damping level mean a converged plateau rather than divergence.
_PLATEAU_REL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model of a rectified camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def project(self, points) -> np.ndarray:
        """Pixel coordinates of camera-frame points (no depth checks)."""
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx,
                         self.fy * p[..., 1] / z + self.cy], axis=-1)

    def in_view(self, pixels) -> np.ndarray:
        px = np.asarray(pixels, dtype=float)
        return ((px[..., 0] >= 0.0) & (px[..., 0] <= self.width - 1.0)
                & (px[..., 1] >= 0.0) & (px[..., 1] <= self.height - 1.0))


@dataclass(frozen=True)
class CameraFrame:
    """Camera image identified by id, stamped on the camera clock."""

    frame_id: int
    timestamp: float


@dataclass(frozen=True)
class FeatureTrack:
    """Observations of one landmark: pixel location per observing frame."""

    landmark_id: int
    frame_ids: np.ndarray
    times: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        fids = np.asarray(self.frame_ids, dtype=int)
        ts = np.asarray(self.times, dtype=float)
        px = np.asarray(self.pixels, dtype=float)
        if not (len(fids) == len(ts) == len(px)) or px.ndim != 2 or px.shape[1] != 2:
            raise ValueError("frame_ids, times and pixels must align, pixels (n, 2)")
        if len(fids) < 2:
            raise ValueError("a track needs at least 2 observations")
        if len(np.unique(fids)) != len(fids):
            raise ValueError("one observation per frame per track")
        for a in (fids, ts, px):
            a.flags.writeable = False
        object.__setattr__(self, "frame_ids", fids)
        object.__setattr__(self, "times", ts)
        object.__setattr__(self, "pixels", px)

    def __len__(self):
        return len(self.frame_ids)


@dataclass(frozen=True)
class Landmark:
    """Triangulated 3D point in the LiDAR-trajectory world frame."""

    position: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ValueError("landmark position must be a finite 3-vector")
        p.flags.writeable = False
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class RobustWeight:
    """M-estimator reweighting of residuals by their pixel norm."""

    kernel: str = "huber"
    scale: float = 2.0

    def __post_init__(self):
        if self.kernel not in ("huber", "cauchy", "none"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if not self.scale > 0.0:
            raise ValueError("kernel scale must be positive")

    def weights(self, norms: np.ndarray) -> np.ndarray:
        s = np.asarray(norms, dtype=float)
        if self.kernel == "none":
            return np.ones_like(s)
        if self.kernel == "huber":
            return np.minimum(1.0, self.scale / np.maximum(s, 1e-300))
        return 1.0 / (1.0 + (s / self.scale) ** 2)

    def cost(self, norms: np.ndarray) -> np.ndarray:
        s = np.asarray(norms, dtype=float)
        if self.kernel == "none":
            return 0.5 * s * s
        if self.kernel == "huber":
            c = self.scale
            return np.where(s <= c, 0.5 * s * s, c * s - 0.5 * c * c)
        c2 = self.scale ** 2
        return 0.5 * c2 * np.log1p(s * s / c2)


@dataclass
class CalibrationState:
    """Optimization state: extrinsic twist, time lag, current landmarks.

    ``xi`` parameterizes the camera-from-LiDAR transform ``exp(xi)``;
    landmarks live in the LiDAR world frame, one row per track.
    """

    xi: np.ndarray
    tau: float
    landmarks: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(6)
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        if not np.isfinite(self.tau):
            raise ValueError("tau must be finite")

    @property
    def pose_cl(self) -> Pose:
        return exp_map(self.xi)


@dataclass(frozen=True)
class RefineConfig:
    keyframes: int = 30
    kernel: str = "huber"
    kernel_scale: float = 2.0           # px
    min_track_length: int = 3           # observations on selected keyframes
    min_parallax_deg: float = 0.5
    stage_a_max_iterations: int = 20
    stage_a_scan_halfwidth: float = 0.6   # s, bracketing scan around tau0
    stage_a_scan_points: int = 25
    max_iterations: int = 100
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.3
    step_tol: float = 1e-8
    cost_rel_tol: float = 1e-10
    max_excluded_fraction: float = 0.3
    max_escalations: int = 10


@dataclass(frozen=True)
class RefineResult:
    """Refined extrinsic (LiDAR-from-camera), time lag, and diagnostics."""

    extrinsic: Pose
    tau: float
    cost_history: tuple
    stage_a_costs: tuple
    mean_reprojection_px: float
    inlier_ratio: float
    converged: bool
    iterations: int
    n_tracks: int
    n_residuals: int


def _point_from_ata(ata: np.ndarray):
    """Homogeneous DLT point from the 4x4 normal matrix of the row system."""
    _, vecs = np.linalg.eigh(ata)
    h = vecs[:, 0]
    if abs(h[3]) < 1e-12 * np.linalg.norm(h):
        return None
    return h[:3] / h[3]


def triangulate(track: FeatureTrack, frame_poses: Sequence[Pose],
                intrinsics: CameraIntrinsics,
                min_parallax_deg: float = 0.5) -> Landmark:
    """Linear (DLT) triangulation of one track.

    ``frame_poses`` are the camera-in-world poses of the observing frames,
    aligned with the track's observations. The algebraic least-squares point
    must be seen with at least ``min_parallax_deg`` of ray separation and
    positive depth in at least two observing frames.
    """
    if len(frame_poses) != len(track):
        raise ValueError("frame_poses must align with the track observations")
    if len(track) < 2:
        raise LowParallaxError("triangulation needs at least 2 observations")
    rows = []
    for pose, px in zip(frame_poses, track.pixels):
        x = (px[0] - intrinsics.cx) / intrinsics.fx
        y = (px[1] - intrinsics.cy) / intrinsics.fy
        m = pose.inverse().matrix[:3]
        rows.append(x * m[2] - m[0])
        rows.append(y * m[2] - m[1])
    rows = np.array(rows)
    point = _point_from_ata(rows.T @ rows)
    if point is None:
        raise LowParallaxError("triangulated point at infinity; rays nearly parallel")

    centers = np.array([p.translation for p in frame_poses])
    rays = point - centers
    norms = np.linalg.norm(rays, axis=1)
    if np.any(norms < 1e-12):
        raise CheiralityError("triangulated point coincides with a camera center")
    rays /= norms[:, None]
    dots = np.clip(rays @ rays.T, -1.0, 1.0)
    max_angle = float(np.max(np.arccos(dots)))
    if max_angle < math.radians(min_parallax_deg):
        raise LowParallaxError(
            f"max triangulation angle {math.degrees(max_angle):.4f} deg below "
            f"{min_parallax_deg} deg")

    depths = np.array([p.inverse().apply(point)[2] for p in frame_poses])
    n_front = int(np.sum(depths > MIN_DEPTH))
    if n_front < 2:
        raise CheiralityError(
            f"triangulated point has positive depth in only {n_front} frames")
    return Landmark(point)


def residual_and_jacobians(pose_cl: Pose, tau: float, landmark,
                           frame_time: float, pixel,
                           lidar_traj: ContinuousTrajectory,
                           intrinsics: CameraIntrinsics):
    """Reprojection residual of one observation plus analytic Jacobians.

    Returns ``(e, J_xi, J_tau, J_pt)`` where ``e = observed - predicted`` in
    pixels. ``J_xi`` is taken w.r.t. a left-multiplicative perturbation
    ``exp(d) * T_CL`` of the extrinsic, ``J_tau`` w.r.t. the time lag through
    the trajectory's piecewise-constant body twist rate, ``J_pt`` w.r.t. the
    landmark position. Raises if the shifted stamp leaves the trajectory span
    or the point falls behind the camera.
    """
    p_w = np.asarray(landmark, dtype=float).reshape(3)
    pose_wl, rate = lidar_traj.interpolate_with_velocity(frame_time + tau)
    r_wl = pose_wl.rotation.matrix
    q = r_wl.T @ (p_w - pose_wl.translation)
    r_cl = pose_cl.rotation.matrix
    p_c = r_cl @ q + pose_cl.translation
    z = p_c[2]
    if z <= MIN_DEPTH:
        raise CheiralityError(f"point depth {z:.6g} m is not positive")
    e = np.asarray(pixel, dtype=float) - intrinsics.project(p_c)

    j_pi = np.array([[intrinsics.fx / z, 0.0, -intrinsics.fx * p_c[0] / z ** 2],
                     [0.0, intrinsics.fy / z, -intrinsics.fy * p_c[1] / z ** 2]])
    # e = obs - pi(p_c), so every block carries -d(pi)/d(p_c) = -j_pi
    j_xi = np.hstack([j_pi @ skew(p_c), -j_pi])
    # d q / d tau = -(r_rate x q + rho_rate) for the segment's body twist rate
    dq = -(np.cross(rate[:3], q) + rate[3:])
    j_tau = -j_pi @ (r_cl @ dq)
    j_pt = -j_pi @ (r_cl @ r_wl.T)
    return e, j_xi, j_tau, j_pt


def reprojection_residual(state: CalibrationState, landmark_index: int,
                          frame_time: float, pixel,
                          lidar_traj: ContinuousTrajectory,
                          intrinsics: CameraIntrinsics) -> np.ndarray:
    """Observed minus predicted pixel for one observation of the state."""
    e, *_ = residual_and_jacobians(state.pose_cl, state.tau,
                                   state.landmarks[landmark_index],
                                   frame_time, pixel, lidar_traj, intrinsics)
    return e


@dataclass
class AssembleStats:
    n_residuals: int = 0
    n_excluded_span: int = 0
    n_invalid_depth: int = 0
    mean_reprojection_px: float = float("nan")
    inlier_ratio: float = float("nan")


def assemble_normal_equations(state: CalibrationState,
                              tracks: Sequence[FeatureTrack],
                              lidar_traj: ContinuousTrajectory,
                              intrinsics: CameraIntrinsics,
                              robust: RobustWeight | None = None):
    """Gauss-Newton normal equations ``H = J' W J``, ``g = J' W e``.

    ``H`` is dense with layout ``[xi(6), tau, landmark_0(3), ...]``; the
    landmark part is exactly 3x3 block diagonal because each residual touches
    one landmark. Observations whose shifted stamp leaves the trajectory span
    are excluded with a warning; observations with non-positive depth get
    weight zero. Returns ``(H, g, cost, stats)``.
    """
    robust = robust or RobustWeight()
    if len(tracks) != len(state.landmarks):
        raise ValueError("state.landmarks must have one row per track")
    problem = _Problem.from_tracks(tracks, lidar_traj, intrinsics)
    h, g, cost, stats = problem.assemble(
        state.pose_cl, state.tau, state.landmarks,
        np.ones(len(tracks), dtype=bool), robust)
    if stats.n_residuals == 0:
        raise NoConstraintsError("every observation was excluded or invalid")
    if stats.n_excluded_span:
        logger.warning("%d observations excluded: shifted stamps outside the "
                       "trajectory span", stats.n_excluded_span)
    return h, g, cost, stats


def schur_solve(h: np.ndarray, g: np.ndarray, landmark_count: int,
                damping: float = 0.0, keep=None) -> np.ndarray:
    """Core update from landmark-marginalized normal equations.

    Eliminates the 3x3 landmark blocks of ``H dx = -g`` by the Schur
    complement and solves the reduced core system, so the returned core
    update equals the core rows of the full dense solve whenever ``H`` is
    nonsingular. ``keep`` optionally lists the core indices allowed to move
    (lag-only mode keeps index 6); the other core parameters are held fixed,
    their rows and columns dropped from the reduced system, and their entries
    come back as zeros. ``damping`` adds ``mu * s * I`` to the kept block
    after marginalization, with ``s`` the largest diagonal entry, so the same
    ``mu`` works across the very different scales of the twist and lag
    columns. Raises :class:`UnobservableCoreError` with the null direction if
    the kept block is singular before damping.
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    n = h.shape[0]
    core = n - 3 * landmark_count
    if core <= 0:
        raise ValueError("landmark_count inconsistent with system size")
    h_cc = h[:core, :core]
    g_c = g[:core]
    if landmark_count:
        j = landmark_count
        h_cs = h[:core, core:].reshape(core, j, 3).transpose(1, 0, 2)  # (j, core, 3)
        h_ss = np.stack([h[core + 3 * k: core + 3 * k + 3,
                           core + 3 * k: core + 3 * k + 3] for k in range(j)])
        g_s = g[core:].reshape(j, 3)
        try:
            h_ss_inv = np.linalg.inv(h_ss)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(
                f"a landmark information block is singular: {exc}") from exc
        h_bar = h_cc - np.einsum("jak,jkl,jbl->ab", h_cs, h_ss_inv, h_cs)
        g_bar = g_c - np.einsum("jak,jkl,jl->a", h_cs, h_ss_inv, g_s)
    else:
        h_bar = h_cc.copy()
        g_bar = g_c.copy()

    keep_idx = np.arange(core) if keep is None else np.asarray(keep, dtype=int)
    if keep is not None and len(keep_idx) < core:
        # Condition on the frozen core parameters: they will not move, so
        # their coupling must not be eliminated into the kept block.
        h_bar = h_bar[np.ix_(keep_idx, keep_idx)]
        g_bar = g_bar[keep_idx]

    w, v = np.linalg.eigh(h_bar)
    tol = _SINGULAR_REL_TOL * max(float(w[-1]), 1.0)
    if w[0] <= tol:
        direction = np.zeros(core)
        direction[keep_idx] = v[:, 0]
        raise UnobservableCoreError(
            "marginalized core system is singular; the motion does not "
            "constrain every parameter (stationary platforms leave the time "
            "lag unobservable)", null_direction=direction)

    scale = max(float(np.max(np.diag(h_bar))), 1.0)
    step = np.linalg.solve(h_bar + damping * scale * np.eye(len(keep_idx)), -g_bar)
    delta = np.zeros(core)
    delta[keep_idx] = step
    return delta


class _Problem:
    """Prepared observation structure for fast repeated evaluation."""

    def __init__(self, frame_times, tracks, lidar_traj, intrinsics):
        self.frame_times = np.asarray(frame_times, dtype=float)
        self.tracks = list(tracks)
        self.lidar_traj = lidar_traj
        self.intrinsics = intrinsics
        obs_f, obs_t, obs_px = [], [], []
        self.track_frame_pos = []
        self.track_pixels = []
        for ti, tr in enumerate(self.tracks):
            pos = np.asarray(tr.frame_positions, dtype=int)
            self.track_frame_pos.append(pos)
            self.track_pixels.append(np.asarray(tr.pixels, dtype=float))
            obs_f.append(pos)
            obs_t.append(np.full(len(pos), ti))
            obs_px.append(tr.pixels)
        self.obs_f = np.concatenate(obs_f) if obs_f else np.zeros(0, dtype=int)
        self.obs_t = np.concatenate(obs_t) if obs_t else np.zeros(0, dtype=int)
        self.obs_px = np.vstack(obs_px) if obs_px else np.zeros((0, 2))
        order = np.lexsort((self.obs_t, self.obs_f))
        self.obs_f = self.obs_f[order]
        self.obs_t = self.obs_t[order]
        self.obs_px = self.obs_px[order]

    @classmethod
    def from_tracks(cls, tracks, lidar_traj, intrinsics):
        """Frame times come from the tracks; frames keyed by first appearance."""
        frame_time = {}
        for tr in tracks:
            for fid, ft in zip(tr.frame_ids, tr.times):
                frame_time[int(fid)] = float(ft)
        fids = sorted(frame_time, key=frame_time.get)
        pos_of = {fid: i for i, fid in enumerate(fids)}
        times = [frame_time[f] for f in fids]
        wrapped = [_TrackView(tr, np.array([pos_of[int(f)] for f in tr.frame_ids]))
                   for tr in tracks]
        return cls(times, wrapped, lidar_traj, intrinsics)

    # -- per-evaluation machinery ------------------------------------------

    def frame_data(self, tau: float):
        t0, t1 = self.lidar_traj.span
        shifted = self.frame_times + tau
        valid = (shifted >= t0) & (shifted <= t1)
        nf = len(self.frame_times)
        r_wl = np.zeros((nf, 3, 3))
        t_wl = np.zeros((nf, 3))
        rates = np.zeros((nf, 6))
        for i in range(nf):
            if not valid[i]:
                continue
            pose, rate = self.lidar_traj.interpolate_with_velocity(float(shifted[i]))
            r_wl[i] = pose.rotation.matrix
            t_wl[i] = pose.translation
            rates[i] = rate
        return valid, r_wl, t_wl, rates

    def triangulate_all(self, pose_cl: Pose, frame_valid, r_wl, t_wl,
                        min_parallax_deg: float):
        """DLT per track from the current camera poses; returns points + mask."""
        t_lc = pose_cl.inverse()
        r_lc, tt_lc = t_lc.rotation.matrix, t_lc.translation
        r_wc = r_wl @ r_lc
        t_wc = np.einsum("fij,j->fi", r_wl, tt_lc) + t_wl
        # world->camera per frame
        r_cw = r_wc.transpose(0, 2, 1)
        t_cw = -np.einsum("fij,fj->fi", r_cw, t_wc)

        intr = self.intrinsics
        min_par = math.radians(min_parallax_deg)
        j = len(self.tracks)
        points = np.zeros((j, 3))
        valid = np.zeros(j, dtype=bool)
        for ti in range(j):
            pos = self.track_frame_pos[ti]
            ok = frame_valid[pos]
            if np.sum(ok) < 2:
                continue
            pos_ok = pos[ok]
            px = self.track_pixels[ti][ok]
            x = (px[:, 0] - intr.cx) / intr.fx
            y = (px[:, 1] - intr.cy) / intr.fy
            m = np.concatenate([r_cw[pos_ok], t_cw[pos_ok][:, :, None]], axis=2)
            rows = np.concatenate([x[:, None] * m[:, 2] - m[:, 0],
                                   y[:, None] * m[:, 2] - m[:, 1]])
            point = _point_from_ata(rows.T @ rows)
            if point is None:
                continue
            rays = point - t_wc[pos_ok]
            norms = np.linalg.norm(rays, axis=1)
            if np.any(norms < 1e-12):
                continue
            rays /= norms[:, None]
            dots = np.clip(rays @ rays.T, -1.0, 1.0)
            if np.max(np.arccos(dots)) < min_par:
                continue
            depths = np.einsum("fj,fj->f", rays, r_wc[pos_ok][:, :, 2]) * norms
            if np.sum(depths > MIN_DEPTH) < 2:
                continue
            points[ti] = point
            valid[ti] = True
        return points, valid

    def assemble(self, pose_cl: Pose, tau: float, landmarks, track_valid,
                 robust: RobustWeight):
        frame_valid, r_wl, t_wl, rates = self.frame_data(tau)
        mask = frame_valid[self.obs_f] & track_valid[self.obs_t]
        n_span_excluded = int(np.sum(~frame_valid[self.obs_f]))
        stats = AssembleStats(n_excluded_span=n_span_excluded)

        slot = np.cumsum(track_valid) - 1    # track index -> landmark slot
        n_active = int(np.sum(track_valid))
        size = CORE_DIM + 3 * n_active
        h = np.zeros((size, size))
        g = np.zeros(size)
        if not np.any(mask):
            return h, g, 0.0, stats

        of = self.obs_f[mask]
        ot = self.obs_t[mask]
        px = self.obs_px[mask]
        p_w = landmarks[ot]

        r_cl = pose_cl.rotation.matrix
        t_cl = pose_cl.translation
        q = np.einsum("nji,nj->ni", r_wl[of], p_w - t_wl[of])
        p_c = q @ r_cl.T + t_cl
        z = p_c[:, 2]
        depth_ok = z > MIN_DEPTH
        stats.n_invalid_depth = int(np.sum(~depth_ok))
        if not np.any(depth_ok):
            return h, g, 0.0, stats
        of, ot, px, q, p_c, z = (a[depth_ok] for a in (of, ot, px, q, p_c, z))

        intr = self.intrinsics
        pred = np.stack([intr.fx * p_c[:, 0] / z + intr.cx,
                         intr.fy * p_c[:, 1] / z + intr.cy], axis=1)
        e = px - pred
        norms = np.linalg.norm(e, axis=1)
        w = robust.weights(norms)
        cost = float(np.sum(robust.cost(norms)))
        stats.n_residuals = len(e)
        stats.mean_reprojection_px = float(np.mean(norms))
        stats.inlier_ratio = float(np.mean(norms <= robust.scale))

        n = len(e)
        j_pi = np.zeros((n, 2, 3))
        j_pi[:, 0, 0] = intr.fx / z
        j_pi[:, 0, 2] = -intr.fx * p_c[:, 0] / z ** 2
        j_pi[:, 1, 1] = intr.fy / z
        j_pi[:, 1, 2] = -intr.fy * p_c[:, 1] / z ** 2

        pcx = np.zeros((n, 3, 3))
        pcx[:, 0, 1] = -p_c[:, 2]
        pcx[:, 0, 2] = p_c[:, 1]
        pcx[:, 1, 0] = p_c[:, 2]
        pcx[:, 1, 2] = -p_c[:, 0]
        pcx[:, 2, 0] = -p_c[:, 1]
        pcx[:, 2, 1] = p_c[:, 0]

        j_core = np.zeros((n, 2, CORE_DIM))
        j_core[:, :, :3] = np.einsum("nij,njk->nik", j_pi, pcx)
        j_core[:, :, 3:6] = -j_pi
        rr = rates[of]
        dq = -(np.cross(rr[:, :3], q) + rr[:, 3:])
        j_core[:, :, 6] = -np.einsum("nij,nj->ni", j_pi, dq @ r_cl.T)
        j_pt = -np.einsum("nij,jk,nlk->nil", j_pi, r_cl, r_wl[of])

        h[:CORE_DIM, :CORE_DIM] = np.einsum("n,nia,nib->ab", w, j_core, j_core)
        g[:CORE_DIM] = np.einsum("n,nia,ni->a", w, j_core, e)

        slots = slot[ot]
        hss = np.zeros((n_active, 3, 3))
        hcs = np.zeros((n_active, CORE_DIM, 3))
        gs = np.zeros((n_active, 3))
        np.add.at(hss, slots, w[:, None, None] * np.einsum("nia,nib->nab", j_pt, j_pt))
        np.add.at(hcs, slots, w[:, None, None] * np.einsum("nia,nib->nab", j_core, j_pt))
        np.add.at(gs, slots, w[:, None] * np.einsum("nia,ni->na", j_pt, e))
        for k in range(n_active):
            sl = slice(CORE_DIM + 3 * k, CORE_DIM + 3 * k + 3)
            h[sl, sl] = hss[k]
            h[:CORE_DIM, sl] = hcs[k]
            h[sl, :CORE_DIM] = hcs[k].T
        g[CORE_DIM:] = gs.reshape(-1)
        return h, g, cost, stats


class _TrackView:
    """Track plus its precomputed positions in the frame array."""

    def __init__(self, track: FeatureTrack, frame_positions):
        self.landmark_id = track.landmark_id
        self.frame_ids = track.frame_ids
        self.times = track.times
        self.pixels = track.pixels
        self.frame_positions = frame_positions

    def __len__(self):
        return len(self.frame_ids)


@dataclass
class _StageOutcome:
    pose_cl: Pose
    tau: float
    costs: list
    converged: bool
    iterations: int
    stats: AssembleStats


def _evaluate(problem: _Problem, pose_cl: Pose, tau: float,
              robust: RobustWeight, cfg: RefineConfig):
    """Re-triangulate and assemble at a state; enforces exclusion limits."""
    frame_valid, r_wl, t_wl, rates = problem.frame_data(tau)
    total_obs = len(problem.obs_f)
    excluded = int(np.sum(~frame_valid[problem.obs_f]))
    if total_obs and excluded > cfg.max_excluded_fraction * total_obs:
        raise SpanExclusionError(
            f"{excluded}/{total_obs} observations have shifted stamps outside "
            f"the trajectory span (limit {cfg.max_excluded_fraction:.0%}); "
            "the time lag drifted too far or the trajectory is too short")
    landmarks, track_valid = problem.triangulate_all(
        pose_cl, frame_valid, r_wl, t_wl, cfg.min_parallax_deg)
    if not np.any(track_valid):
        raise NoConstraintsError(
            "no track survived triangulation (parallax/cheirality)")
    h, g, cost, stats = problem.assemble(pose_cl, tau, landmarks,
                                         track_valid, robust)
    if stats.n_residuals == 0:
        raise NoConstraintsError("every residual was excluded or invalid")
    n_active = int(np.sum(track_valid))
    return h, g, cost, stats, n_active


def _optimize(problem: _Problem, pose_cl: Pose, tau: float,
              robust: RobustWeight, cfg: RefineConfig,
              free: str, max_iterations: int) -> _StageOutcome:
    keep = [6] if free == "tau" else None
    h, g, cost, stats, n_lm = _evaluate(problem, pose_cl, tau, robust, cfg)
    costs = [cost]
    mu = cfg.mu0
    converged = False
    iterations = 0
    for _ in range(max_iterations):
        iterations += 1
        accepted = False
        delta = None
        rel_increase = float("inf")
        for _escalation in range(cfg.max_escalations):
            delta = schur_solve(h, g, n_lm, damping=mu, keep=keep)
            cand_pose = exp_map(delta[:6]) @ pose_cl
            cand_tau = tau + float(delta[6])
            try:
                h2, g2, cost2, stats2, n_lm2 = _evaluate(
                    problem, cand_pose, cand_tau, robust, cfg)
            except (SpanExclusionError, NoConstraintsError):
                rel_increase = float("inf")
                mu *= cfg.mu_up
                continue
            if cost2 <= cost:
                accepted = True
                break
            rel_increase = (cost2 - cost) / max(cost, 1e-300)
            mu *= cfg.mu_up
        if not accepted:
            # A negligible rejected step, or a regression within the
            # re-triangulation noise floor, is a converged plateau rather
            # than divergence.
            if delta is not None and (np.max(np.abs(delta)) < cfg.step_tol
                                      or rel_increase <= _PLATEAU_REL):
                converged = True
                break
            raise NonConvergenceError(
                f"cost still increasing after {cfg.max_escalations} damping "
                "escalations",
                best={"pose_cl": pose_cl, "tau": tau, "cost": cost})
        rel_drop = (cost - cost2) / cost if cost > 0.0 else 0.0
        pose_cl, tau = cand_pose, cand_tau
        h, g, cost, stats, n_lm = h2, g2, cost2, stats2, n_lm2
        costs.append(cost)
        mu = max(mu * cfg.mu_down, 1e-12)
        if np.max(np.abs(delta)) < cfg.step_tol or rel_drop < cfg.cost_rel_tol:
            converged = True
            break
    return _StageOutcome(pose_cl, tau, costs, converged, iterations, stats)


def _scan_tau(problem: _Problem, pose_cl: Pose, tau0: float,
              robust: RobustWeight, cfg: RefineConfig) -> float:
    """Coarse bracketing scan of the lag before local iterations.

    The lag-only cost at a rough extrinsic can have local minima away from
    the true offset, so descent alone cannot be trusted to escape a large
    rough-sync error. Candidates are ranked by mean robust cost per residual
    to stay comparable when span exclusions change the residual set.
    """
    if cfg.stage_a_scan_points < 2 or cfg.stage_a_scan_halfwidth <= 0.0:
        return tau0
    n = cfg.stage_a_scan_points | 1   # odd, so tau0 itself is a candidate
    offsets = np.linspace(-cfg.stage_a_scan_halfwidth,
                          cfg.stage_a_scan_halfwidth, n)
    best_tau, best_score = tau0, np.inf
    for off in offsets:
        try:
            _, _, cost, stats, _ = _evaluate(problem, pose_cl, tau0 + off,
                                             robust, cfg)
        except (SpanExclusionError, NoConstraintsError):
            continue
        score = cost / stats.n_residuals
        if score < best_score:
            best_score, best_tau = score, tau0 + float(off)
    return best_tau


def _select_keyframes(frames: Sequence[CameraFrame], count: int):
    ordered = sorted(frames, key=lambda f: f.timestamp)
    if len(ordered) <= count:
        return ordered
    idx = np.unique(np.round(np.linspace(0, len(ordered) - 1, count)).astype(int))
    return [ordered[i] for i in idx]


def _restrict_tracks(tracks, keyframe_ids, min_len):
    kept = []
    for tr in tracks:
        mask = np.isin(tr.frame_ids, keyframe_ids)
        if int(np.sum(mask)) < max(min_len, 2):
            continue
        kept.append(FeatureTrack(tr.landmark_id, tr.frame_ids[mask],
                                 tr.times[mask], tr.pixels[mask]))
    return kept


def refine_calibration(coarse_result, frames: Sequence[CameraFrame],
                       tracks: Sequence[FeatureTrack],
                       lidar_traj: ContinuousTrajectory,
                       intrinsics: CameraIntrinsics,
                       config: RefineConfig | None = None,
                       camera_poses: Sequence[StampedPose] | None = None,
                       tau_only: bool = False) -> RefineResult:
    """Joint refinement of the extrinsic and time lag from feature tracks.

    Stage A refines only the lag (extrinsic and structure marginalized) to
    escape the rough-sync error basin. The extrinsic is then re-solved in
    closed form with corrected timestamps when ``camera_poses`` are supplied
    (kept only if it does not increase the cost). Stage B jointly refines the
    extrinsic and lag with damped Gauss-Newton steps, re-triangulating the
    structure every iteration. ``tau_only`` stops after stage A.
    """
    cfg = config or RefineConfig()
    robust = RobustWeight(cfg.kernel, cfg.kernel_scale)
    keyframes = _select_keyframes(frames, cfg.keyframes)
    kf_ids = np.array([f.frame_id for f in keyframes])
    selected = _restrict_tracks(tracks, kf_ids, cfg.min_track_length)
    if not selected:
        raise NoConstraintsError(
            "no track has enough observations on the selected keyframes",
            stage="refine")
    problem = _Problem.from_tracks(selected, lidar_traj, intrinsics)

    pose_cl = coarse_result.extrinsic.inverse()
    tau = float(coarse_result.time_offset)

    try:
        tau = _scan_tau(problem, pose_cl, tau, robust, cfg)
        stage_a = _optimize(problem, pose_cl, tau, robust, cfg,
                            free="tau", max_iterations=cfg.stage_a_max_iterations)
    except CalibrationError as e:
        e.stage = e.stage or "refine-lag"
        raise
    tau = stage_a.tau

    if tau_only:
        return RefineResult(
            extrinsic=stage_a.pose_cl.inverse(), tau=tau,
            cost_history=tuple(stage_a.costs), stage_a_costs=tuple(stage_a.costs),
            mean_reprojection_px=stage_a.stats.mean_reprojection_px,
            inlier_ratio=stage_a.stats.inlier_ratio,
            converged=stage_a.converged, iterations=stage_a.iterations,
            n_tracks=len(selected), n_residuals=stage_a.stats.n_residuals)

    if camera_poses is not None:
        pose_cl = _closed_form_update(problem, pose_cl, tau, robust, cfg,
                                      camera_poses, lidar_traj)

    try:
        stage_b = _optimize(problem, pose_cl, tau, robust, cfg,
                            free="joint", max_iterations=cfg.max_iterations)
    except CalibrationError as e:
        e.stage = e.stage or "refine-joint"
        raise

    return RefineResult(
        extrinsic=stage_b.pose_cl.inverse(), tau=stage_b.tau,
        cost_history=tuple(stage_b.costs), stage_a_costs=tuple(stage_a.costs),
        mean_reprojection_px=stage_b.stats.mean_reprojection_px,
        inlier_ratio=stage_b.stats.inlier_ratio,
        converged=stage_b.converged,
        iterations=stage_a.iterations + stage_b.iterations,
        n_tracks=len(selected), n_residuals=stage_b.stats.n_residuals)


def _closed_form_update(problem, pose_cl, tau, robust, cfg, camera_poses,
                        lidar_traj):
    """Re-run the hand-eye solves with lag-corrected stamps; keep if no worse."""
    t0, t1 = lidar_traj.span
    corrected = [StampedPose(p.timestamp + tau, p.pose) for p in camera_poses
                 if t0 <= p.timestamp + tau <= t1]
    try:
        pairs = coarse_mod.extract_pairs(lidar_traj, corrected)
        rot = coarse_mod.solve_rotation(pairs)
        t, _ = coarse_mod.solve_translation_scale(pairs, rot)
    except CalibrationError as exc:
        logger.info("closed-form extrinsic update skipped: %s", exc)
        return pose_cl
    candidate = Pose(rot, t).inverse()
    try:
        _, _, cost_cur, _, _ = _evaluate(problem, pose_cl, tau, robust, cfg)
        _, _, cost_new, _, _ = _evaluate(problem, candidate, tau, robust, cfg)
    except CalibrationError as exc:
        logger.info("closed-form extrinsic update skipped: %s", exc)
        return pose_cl
    if cost_new <= cost_cur:
        return candidate
    logger.info("closed-form extrinsic update rejected (cost %.3g -> %.3g)",
                cost_cur, cost_new)
    return pose_cl
