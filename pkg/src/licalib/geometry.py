"""SO(3)/SE(3) primitives and piecewise-geodesic trajectory interpolation.

Twists are plain ``(6,)`` arrays ordered ``[r, rho]``: rotational part first
(axis-angle vector, radians), translational part second (meters). All values
are immutable after construction and every operation is a pure function, so
everything here is safe to share across workers.

A pose between two knots ``T_i, T_j`` at times ``t_i <= tau <= t_j`` is
``T_i * exp(alpha * log(T_i^-1 T_j))`` with ``alpha = (tau - t_i)/(t_j - t_i)``,
i.e. a single coupled geodesic on SE(3), not separate rotation/translation
blends.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateRotationError, OutOfRangeError

# Below this rotation angle (rad) exp/log switch to 2nd-order Taylor branches;
# both branches agree to ~1e-12 at the switch point.
SMALL_ANGLE = 1e-8

# Rotations closer than this to pi are rejected by the log map.
PI_MARGIN = 1e-6

# Quaternion renormalization kicks in after composition chains this long.
_RENORM_CHAIN = 100


def skew(v) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _quat_normalize(q):
    return q / np.linalg.norm(q)


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_to_matrix(q):
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def _matrix_to_quat(m):
    # Shepperd's method: pick the numerically largest pivot.
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        return np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    i = int(np.argmax(np.diag(m)))
    if i == 0:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        return np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    if i == 1:
        s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        return np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
    return np.array([
        (m[1, 0] - m[0, 1]) / s,
        (m[0, 2] + m[2, 0]) / s,
        (m[1, 2] + m[2, 1]) / s,
        0.25 * s,
    ])


class Rotation:
    """Element of SO(3), stored as a unit quaternion (w, x, y, z).

    The external contract is the 3x3 orthonormal matrix (``.matrix``); the
    quaternion is an internal detail that keeps composition chains from
    drifting off the manifold. Immutable.
    """

    __slots__ = ("_q", "_chain")

    def __init__(self, quat_wxyz, _chain: int = 0):
        q = np.asarray(quat_wxyz, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"quaternion must be a 4-vector, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion has non-finite entries")
        if _chain == 0 or _chain > _RENORM_CHAIN:
            q = _quat_normalize(q)
            _chain = 0
        q.flags.writeable = False
        object.__setattr__(self, "_q", q)
        object.__setattr__(self, "_chain", _chain)

    def __setattr__(self, name, value):
        raise AttributeError("Rotation is immutable")

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        return cls(_matrix_to_quat(m))

    @classmethod
    def from_rotvec(cls, r) -> "Rotation":
        r = np.asarray(r, dtype=float)
        if r.shape != (3,) or not np.all(np.isfinite(r)):
            raise ValueError("rotation vector must be a finite 3-vector")
        theta = np.linalg.norm(r)
        if theta < SMALL_ANGLE:
            # 2nd-order Taylor of cos(t/2) and sin(t/2)/t
            w = 1.0 - theta * theta / 8.0
            xyz = (0.5 - theta * theta / 48.0) * r
        else:
            w = np.cos(0.5 * theta)
            xyz = (np.sin(0.5 * theta) / theta) * r
        return cls(np.concatenate(([w], xyz)))

    @property
    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self._q)

    @property
    def quat(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z)."""
        return self._q.copy()

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]. Safe everywhere, including near pi."""
        n = np.linalg.norm(self._q[1:])
        return 2.0 * np.arctan2(n, abs(self._q[0]))

    def rotvec(self) -> np.ndarray:
        """Canonical axis-angle vector; raises near a half turn."""
        q = self._q if self._q[0] >= 0.0 else -self._q
        w, xyz = q[0], q[1:]
        n = np.linalg.norm(xyz)
        angle = 2.0 * np.arctan2(n, w)
        if angle > np.pi - PI_MARGIN:
            raise DegenerateRotationError(
                f"rotation angle {angle:.9f} rad is within {PI_MARGIN:g} of pi; "
                "log map is not unique"
            )
        if angle < SMALL_ANGLE:
            # 2 atan2(n, w)/n ~ (2/w)(1 - n^2/(3 w^2)) for small n
            return xyz * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
        return xyz * (angle / n)

    def inverse(self) -> "Rotation":
        q = self._q
        return Rotation(np.array([q[0], -q[1], -q[2], -q[3]]), _chain=self._chain)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation(_quat_mul(self._q, other._q),
                        _chain=self._chain + other._chain + 1)

    def apply(self, v) -> np.ndarray:
        """Rotate one 3-vector or an (N, 3) stack."""
        v = np.asarray(v, dtype=float)
        return v @ self.matrix.T

    def __repr__(self):
        w, x, y, z = self._q
        return f"Rotation(quat=[{w:.6f}, {x:.6f}, {y:.6f}, {z:.6f}])"


class Pose:
    """Rigid transform in SE(3): rotation plus translation (meters)."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        t = np.array(translation, dtype=float)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite entries")
        t.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, r_matrix, t) -> "Pose":
        return cls(Rotation.from_matrix(r_matrix), t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation @ other.rotation,
                    self.rotation.apply(other.translation) + self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one point or an (N, 3) stack into the parent frame."""
        return self.rotation.apply(points) + self.translation

    def __repr__(self):
        t = self.translation
        return (f"Pose(t=[{t[0]:.6f}, {t[1]:.6f}, {t[2]:.6f}], "
                f"angle={self.rotation.angle:.6f})")


def _so3_left_jacobian(r) -> np.ndarray:
    """V(r) with exp([r, rho]) translation = V(r) rho."""
    theta = np.linalg.norm(r)
    k = skew(r)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    # 2 sin^2(t/2) == 1 - cos(t) without cancellation at small angles
    b = 2.0 * np.sin(0.5 * theta) ** 2 / t2
    return (np.eye(3) + b * k
            + ((theta - np.sin(theta)) / (t2 * theta)) * (k @ k))


def _so3_left_jacobian_inv(r) -> np.ndarray:
    theta = np.linalg.norm(r)
    k = skew(r)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    a = np.sin(theta) / theta
    b = 2.0 * np.sin(0.5 * theta) ** 2 / (theta * theta)
    c = (1.0 - a / (2.0 * b)) / (theta * theta)
    return np.eye(3) - 0.5 * k + c * (k @ k)


def exp_map(xi) -> Pose:
    """SE(3) exponential of a twist ``[r, rho]``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"twist must be a 6-vector, got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise ValueError("twist has non-finite entries")
    r, rho = xi[:3], xi[3:]
    return Pose(Rotation.from_rotvec(r), _so3_left_jacobian(r) @ rho)


def log_map(pose: Pose) -> np.ndarray:
    """Twist ``[r, rho]`` with ``exp_map(log_map(P)) == P``.

    Raises :class:`DegenerateRotationError` within ``PI_MARGIN`` of a half
    turn, where the axis is ambiguous.
    """
    r = pose.rotation.rotvec()
    rho = _so3_left_jacobian_inv(r) @ pose.translation
    return np.concatenate([r, rho])


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in ``a``'s frame: ``a^-1 b``."""
    return a.inverse() @ b


@dataclass(frozen=True)
class StampedPose:
    """A pose tagged with a sensor-clock timestamp in seconds."""

    timestamp: float
    pose: Pose

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")


class ContinuousTrajectory:
    """Time-sorted pose knots with geodesic interpolation between them.

    Queries outside the knot span raise :class:`OutOfRangeError`; there is no
    extrapolation, because time-lag perturbations of query stamps would
    otherwise corrupt residuals silently. Callers must trim frames whose
    shifted timestamps leave the span.
    """

    def __init__(self, knots: Sequence[StampedPose], clock_id: str = "lidar"):
        if len(knots) < 2:
            raise ValueError("trajectory needs at least 2 knots to answer queries")
        times = np.array([k.timestamp for k in knots], dtype=float)
        if np.any(np.diff(times) <= 0.0):
            bad = int(np.flatnonzero(np.diff(times) <= 0.0)[0]) + 1
            raise ValueError(f"knot timestamps must be strictly increasing "
                             f"(violated at index {bad})")
        times.flags.writeable = False
        self.clock_id = clock_id
        self.times = times
        self.poses = tuple(k.pose for k in knots)
        # Per-segment twist log(T_i^-1 T_{i+1}); consecutive knots must stay
        # well clear of a half-turn apart.
        self._seg_twists = np.array(
            [log_map(relative_pose(self.poses[i], self.poses[i + 1]))
             for i in range(len(knots) - 1)])
        self._seg_twists.flags.writeable = False

    def __len__(self):
        return len(self.poses)

    @property
    def knots(self) -> tuple:
        return tuple(StampedPose(t, p) for t, p in zip(self.times, self.poses))

    @property
    def span(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])

    def _segment(self, tau: float) -> int:
        t0, t1 = self.span
        if not (t0 <= tau <= t1):
            raise OutOfRangeError(
                f"query {tau:.9f} s outside knot span [{t0:.9f}, {t1:.9f}] "
                f"({self.clock_id} clock)")
        i = int(np.searchsorted(self.times, tau, side="right")) - 1
        return min(max(i, 0), len(self.poses) - 2)

    def interpolate(self, tau: float) -> Pose:
        """Pose at ``tau``; exact at knot timestamps."""
        i = self._segment(tau)
        if tau == self.times[i]:
            return self.poses[i]
        if tau == self.times[i + 1]:
            return self.poses[i + 1]
        alpha = (tau - self.times[i]) / (self.times[i + 1] - self.times[i])
        return self.poses[i] @ exp_map(alpha * self._seg_twists[i])

    def interpolate_with_velocity(self, tau: float):
        """Pose at ``tau`` plus the segment's constant body twist rate (per s).

        The rate is d/dtau of the interpolation in the body frame, i.e.
        ``seg_twist / seg_dt``, constant within each segment (right-continuous
        at interior knots).
        """
        i = self._segment(tau)
        dt = self.times[i + 1] - self.times[i]
        rate = self._seg_twists[i] / dt
        if tau == self.times[i]:
            return self.poses[i], rate
        if tau == self.times[i + 1]:
            return self.poses[i + 1], rate
        alpha = (tau - self.times[i]) / dt
        return self.poses[i] @ exp_map(alpha * self._seg_twists[i]), rate

    def shifted(self, dt: float) -> "ContinuousTrajectory":
        """Same poses with every knot timestamp moved by ``dt`` seconds."""
        return ContinuousTrajectory(
            [StampedPose(t + dt, p) for t, p in zip(self.times, self.poses)],
            clock_id=self.clock_id)

    def __repr__(self):
        t0, t1 = self.span
        return (f"ContinuousTrajectory({len(self)} knots, "
                f"[{t0:.3f}, {t1:.3f}] s, clock={self.clock_id!r})")


def interpolate(trajectory: ContinuousTrajectory, tau: float) -> Pose:
    """Module-level alias for :meth:`ContinuousTrajectory.interpolate`."""
    return trajectory.interpolate(tau)


def rotation_geodesic_distance(a: Rotation, b: Rotation) -> float:
    """Angle of a^T b, the geodesic distance on SO(3)."""
    return (a.inverse() @ b).angle


def project_to_rotation(m) -> Rotation:
    """Nearest rotation to an arbitrary 3x3 matrix (SVD, det forced to +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return Rotation.from_matrix(u @ np.diag([1.0, 1.0, d]) @ vt)
