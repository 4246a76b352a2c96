import numpy as np
import pytest

from licalib.errors import DegenerateRotationError, OutOfRangeError
from licalib.geometry import (
    ContinuousTrajectory,
    Pose,
    Rotation,
    StampedPose,
    exp_map,
    interpolate,
    log_map,
    relative_pose,
)


def random_twist(rng, max_angle=np.pi - 1e-3, max_trans=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    rho = rng.uniform(-max_trans, max_trans, size=3)
    return np.concatenate([angle * axis, rho])


def test_exp_map_identity():
    p = exp_map(np.zeros(6))
    assert np.allclose(p.matrix, np.eye(4), atol=1e-15)


def test_exp_map_quarter_turn_about_z():
    p = exp_map(np.array([0.0, 0.0, np.pi / 2.0, 0.0, 0.0, 0.0]))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(p.rotation.matrix, expected, atol=1e-12)
    assert np.allclose(p.translation, 0.0, atol=1e-15)


def test_exp_log_roundtrip_specific():
    xi = np.array([0.3, -0.2, 0.1, 1.0, 2.0, -0.5])
    assert np.allclose(log_map(exp_map(xi)), xi, atol=1e-10)


def test_exp_map_rejects_non_finite():
    with pytest.raises(ValueError):
        exp_map(np.array([np.nan, 0, 0, 0, 0, 0]))
    with pytest.raises(ValueError):
        exp_map(np.array([np.inf, 0, 0, 0, 0, 0]))


def test_log_map_identity_and_pure_translation():
    assert np.allclose(log_map(Pose.identity()), 0.0, atol=1e-15)
    t = np.array([1.5, -2.0, 0.25])
    p = Pose(Rotation.identity(), t)
    xi = log_map(p)
    assert np.allclose(xi[:3], 0.0, atol=1e-15)
    assert np.allclose(xi[3:], t, atol=1e-15)


def test_log_map_rejects_near_pi():
    p = Pose(Rotation.from_rotvec([np.pi - 1e-9, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(DegenerateRotationError):
        log_map(p)


def test_exp_log_roundtrip_property():
    # 1e4 random twists with |r| < pi - 1e-3
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        xi = random_twist(rng)
        err = np.max(np.abs(log_map(exp_map(xi)) - xi))
        worst = max(worst, err)
    assert worst < 1e-9


def test_small_angle_branch_agreement():
    # Taylor and closed-form branches must agree near the 1e-8 rad switch.
    for theta in (5e-9, 1e-8, 2e-8):
        xi = np.array([theta, 0.0, 0.0, 0.3, -0.1, 0.2])
        p = exp_map(xi)
        assert np.allclose(log_map(p), xi, atol=1e-12)


def test_pose_compose_inverse():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = exp_map(random_twist(rng))
        b = exp_map(random_twist(rng))
        c = exp_map(random_twist(rng))
        ab_c = (a @ b) @ c
        a_bc = a @ (b @ c)
        assert np.allclose(ab_c.matrix, a_bc.matrix, atol=1e-12)
        ident = a.inverse() @ a
        assert np.allclose(ident.matrix, np.eye(4), atol=1e-9)


def test_rotation_matrix_invariants():
    rng = np.random.default_rng(2)
    for _ in range(100):
        r = Rotation.from_rotvec(rng.normal(size=3))
        m = r.matrix
        assert np.allclose(m @ m.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(m) - 1.0) < 1e-9


def test_rotation_long_composition_chain_stays_orthonormal():
    rng = np.random.default_rng(3)
    r = Rotation.identity()
    step = Rotation.from_rotvec(rng.normal(size=3) * 0.1)
    for _ in range(1000):
        r = r @ step
    m = r.matrix
    assert np.allclose(m @ m.T, np.eye(3), atol=1e-9)


def test_relative_pose_trivial_and_compose_back():
    rng = np.random.default_rng(4)
    a = exp_map(random_twist(rng))
    assert np.allclose(relative_pose(a, a).matrix, np.eye(4), atol=1e-12)
    b = exp_map(random_twist(rng))
    assert np.allclose(relative_pose(Pose.identity(), b).matrix, b.matrix,
                       atol=1e-15)
    for _ in range(50):
        a = exp_map(random_twist(rng))
        b = exp_map(random_twist(rng))
        rel = relative_pose(a, b)
        assert np.max(np.abs((a @ rel).matrix - b.matrix)) < 1e-12


def make_trajectory(rng, n=10, dt=0.1, t0=0.0):
    knots = []
    pose = exp_map(random_twist(rng, max_angle=0.3, max_trans=0.5))
    for i in range(n):
        knots.append(StampedPose(t0 + i * dt, pose))
        pose = pose @ exp_map(random_twist(rng, max_angle=0.4, max_trans=0.3))
    return ContinuousTrajectory(knots)


def test_interpolate_endpoint_exactness():
    rng = np.random.default_rng(5)
    traj = make_trajectory(rng)
    for t, p in zip(traj.times, traj.poses):
        q = traj.interpolate(float(t))
        assert np.max(np.abs(q.matrix - p.matrix)) < 1e-12


def test_interpolate_linear_translation():
    knots = [
        StampedPose(0.0, Pose.identity()),
        StampedPose(1.0, Pose(Rotation.identity(), [2.0, 0.0, 0.0])),
    ]
    traj = ContinuousTrajectory(knots)
    p = traj.interpolate(0.25)
    assert np.allclose(p.translation, [0.5, 0.0, 0.0], atol=1e-12)
    assert np.allclose(p.rotation.matrix, np.eye(3), atol=1e-12)


def test_interpolate_rejects_out_of_span():
    rng = np.random.default_rng(6)
    traj = make_trajectory(rng)
    t0, t1 = traj.span
    with pytest.raises(OutOfRangeError):
        traj.interpolate(t0 - 1e-6)
    with pytest.raises(OutOfRangeError):
        traj.interpolate(t1 + 1e-6)


def test_interpolate_left_equivariance():
    rng = np.random.default_rng(7)
    traj = make_trajectory(rng)
    g = exp_map(random_twist(rng))
    moved = ContinuousTrajectory(
        [StampedPose(t, g @ p) for t, p in zip(traj.times, traj.poses)])
    for tau in np.linspace(*traj.span, 23):
        lhs = moved.interpolate(float(tau)).matrix
        rhs = (g @ traj.interpolate(float(tau))).matrix
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_interpolate_monotone_alpha():
    rng = np.random.default_rng(8)
    a = exp_map(random_twist(rng, max_angle=0.5))
    rel = exp_map(random_twist(rng, max_angle=2.0))
    traj = ContinuousTrajectory([StampedPose(0.0, a), StampedPose(2.0, a @ rel)])
    total = rel.rotation.angle
    for alpha in np.linspace(0.0, 1.0, 17):
        p = traj.interpolate(float(2.0 * alpha))
        got = relative_pose(a, p).rotation.angle
        assert abs(got - alpha * total) < 1e-10


def test_interpolate_with_velocity_matches_finite_difference():
    rng = np.random.default_rng(9)
    traj = make_trajectory(rng)
    h = 1e-7
    for tau in (0.05, 0.131, 0.77):
        pose, rate = traj.interpolate_with_velocity(tau)
        p0 = traj.interpolate(tau - h)
        p1 = traj.interpolate(tau + h)
        fd = log_map(relative_pose(p0, p1)) / (2.0 * h)
        assert np.allclose(fd, rate, rtol=1e-5, atol=1e-6)


def test_trajectory_validation():
    p = Pose.identity()
    with pytest.raises(ValueError):
        ContinuousTrajectory([StampedPose(0.0, p)])
    with pytest.raises(ValueError):
        ContinuousTrajectory([StampedPose(0.0, p), StampedPose(0.0, p)])
    with pytest.raises(ValueError):
        StampedPose(np.nan, p)


def test_module_level_interpolate_alias():
    traj = ContinuousTrajectory([
        StampedPose(0.0, Pose.identity()),
        StampedPose(1.0, Pose(Rotation.identity(), [1.0, 0.0, 0.0])),
    ])
    assert np.allclose(interpolate(traj, 0.5).translation, [0.5, 0.0, 0.0])
