import numpy as np
import pytest

from besplat import se3, trajectory
from besplat.se3 import SE3Pose, Twist
from besplat.trajectory import Trajectory, TrajectoryModel


def pose_close(a, b, tol=1e-9):
    ang, tn = se3.distance(a, b)
    return ang < tol and tn < tol


def random_knots(rng, n, spread=0.4):
    base = se3.exp(Twist(rng.normal(size=3), rng.normal(size=3) * 0.5))
    return [
        se3.compose(base, se3.exp(Twist(rng.normal(size=3) * spread,
                                        rng.normal(size=3) * spread)))
        for _ in range(n)
    ]


def make_traj(model, knots, exposure=(0.0, 1.0)):
    dt = None
    if model is TrajectoryModel.CUBIC_BSPLINE:
        dt = (exposure[1] - exposure[0]) / (len(knots) - 3)
    return Trajectory(model, knots, exposure, t0=exposure[0], dt=dt)


class TestCumulativeBasis:
    def test_u_zero(self):
        b = trajectory.cumulative_basis(0.0).b
        np.testing.assert_allclose(b, [1.0, 5.0 / 6.0, 1.0 / 6.0, 0.0], atol=1e-15)

    def test_u_one_limit(self):
        b = trajectory._basis_components(np.asarray(1.0))
        np.testing.assert_allclose(b, [1.0, 1.0, 5.0 / 6.0, 1.0 / 6.0], atol=1e-15)

    def test_u_half(self):
        # hand evaluation of (1/6) M [1, u, u^2, u^3] at u = 1/2:
        # (1, 47/48, 1/2, 1/48)
        b = trajectory.cumulative_basis(0.5).b
        np.testing.assert_allclose(b, [1.0, 47.0 / 48.0, 0.5, 1.0 / 48.0], atol=1e-15)

    def test_range_errors(self):
        for u in (-0.01, 1.0, 1.5):
            with pytest.raises(ValueError):
                trajectory.cumulative_basis(u)

    def test_monotone_non_increasing(self):
        for u in np.linspace(0.0, 1.0 - 1e-9, 101):
            b = trajectory.cumulative_basis(float(u)).b
            assert b[0] == 1.0
            assert np.all(np.diff(b) <= 1e-15)
            assert np.all(b[1:] >= 0.0) and np.all(b[1:] <= 1.0)


class TestValidation:
    def test_knot_arity(self):
        p = SE3Pose.identity()
        with pytest.raises(ValueError):
            Trajectory(TrajectoryModel.LINEAR, [p] * 3, (0.0, 1.0))
        with pytest.raises(ValueError):
            Trajectory(TrajectoryModel.BEZIER7, [p] * 7, (0.0, 1.0))
        with pytest.raises(ValueError):
            Trajectory(TrajectoryModel.CUBIC_BSPLINE, [p] * 3, (0.0, 1.0), dt=1.0)

    def test_bspline_needs_dt(self):
        p = SE3Pose.identity()
        with pytest.raises(ValueError):
            Trajectory(TrajectoryModel.CUBIC_BSPLINE, [p] * 4, (0.0, 1.0))

    def test_exposure_outside_coverage(self):
        p = SE3Pose.identity()
        with pytest.raises(ValueError):
            Trajectory(TrajectoryModel.CUBIC_BSPLINE, [p] * 4, (0.0, 2.0), t0=0.0, dt=1.0)


class TestLinear:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        knots = random_knots(rng, 2)
        traj = make_traj(TrajectoryModel.LINEAR, knots)
        assert pose_close(trajectory.eval_linear(traj, 0.0), knots[0])
        assert pose_close(trajectory.eval_linear(traj, 1.0), knots[1])

    def test_translation_midpoint(self):
        knots = [SE3Pose(translation=[0.0, 0.0, 0.0]), SE3Pose(translation=[2.0, 0.0, 0.0])]
        traj = make_traj(TrajectoryModel.LINEAR, knots)
        p = trajectory.eval_linear(traj, 0.5)
        np.testing.assert_allclose(p.translation, [1.0, 0.0, 0.0], atol=1e-12)

    def test_wrong_knot_count_rejected(self):
        knots = random_knots(np.random.default_rng(1), 8)
        traj = make_traj(TrajectoryModel.BEZIER7, knots)
        with pytest.raises(ValueError):
            trajectory.eval_linear(traj, 0.5)

    def test_u_out_of_range(self):
        traj = make_traj(TrajectoryModel.LINEAR, random_knots(np.random.default_rng(2), 2))
        with pytest.raises(ValueError):
            trajectory.eval_linear(traj, 1.2)


class TestBezier7:
    def test_endpoint_interpolation(self):
        rng = np.random.default_rng(3)
        knots = random_knots(rng, 8)
        traj = make_traj(TrajectoryModel.BEZIER7, knots)
        assert pose_close(trajectory.eval_bezier7(traj, 0.0), knots[0])
        assert pose_close(trajectory.eval_bezier7(traj, 1.0), knots[-1])

    def test_constant_knots(self):
        rng = np.random.default_rng(4)
        p = random_knots(rng, 1)[0]
        traj = make_traj(TrajectoryModel.BEZIER7, [p] * 8)
        for u in (0.0, 0.31, 0.77, 1.0):
            assert pose_close(trajectory.eval_bezier7(traj, u), p)

    def test_matches_scalar_bezier_for_commuting_translations(self):
        rng = np.random.default_rng(5)
        offsets = rng.normal(size=(8, 3))
        knots = [SE3Pose(translation=o) for o in offsets]
        traj = make_traj(TrajectoryModel.BEZIER7, knots)
        from math import comb
        for u in (0.2, 0.5, 0.9):
            bern = np.array([comb(7, i) * u**i * (1 - u) ** (7 - i) for i in range(8)])
            expected = bern @ offsets
            got = trajectory.eval_bezier7(traj, u).translation
            np.testing.assert_allclose(got, expected, atol=1e-12)


class TestCubicBSpline:
    def test_constant_knots(self):
        rng = np.random.default_rng(6)
        p = random_knots(rng, 1)[0]
        traj = make_traj(TrajectoryModel.CUBIC_BSPLINE, [p] * 6)
        for t in (0.0, 0.4, 0.99, 1.0):
            assert pose_close(trajectory.eval_cubic_bspline(traj, t), p)

    def test_pure_translation_expansion(self):
        # knots at x = 0, 1, 2, 3: at u = 0 the cumulative weights give
        # x = 0 + 5/6 * 1 + 1/6 * 1 + 0 = 1
        knots = [SE3Pose(translation=[float(i), 0.0, 0.0]) for i in range(4)]
        traj = Trajectory(TrajectoryModel.CUBIC_BSPLINE, knots, (0.0, 1.0), t0=0.0, dt=1.0)
        p = trajectory.eval_cubic_bspline(traj, 0.0)
        np.testing.assert_allclose(p.translation, [1.0, 0.0, 0.0], atol=1e-12)

    def test_c0_continuity_at_segment_boundaries(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            knots = random_knots(rng, 7, spread=0.3)
            traj = Trajectory(TrajectoryModel.CUBIC_BSPLINE, knots, (0.0, 4.0), t0=0.0, dt=1.0)
            for boundary in (1.0, 2.0, 3.0):
                below = trajectory.eval_cubic_bspline(traj, boundary - 1e-10)
                at = trajectory.eval_cubic_bspline(traj, boundary)
                assert pose_close(below, at, tol=1e-8)

    def test_out_of_coverage(self):
        traj = Trajectory(TrajectoryModel.CUBIC_BSPLINE,
                          random_knots(np.random.default_rng(8), 4),
                          (0.0, 1.0), t0=0.0, dt=1.0)
        with pytest.raises(ValueError):
            trajectory.eval_cubic_bspline(traj, 1.5)


class TestLeftInvariance:
    @pytest.mark.parametrize("model,n", [
        (TrajectoryModel.LINEAR, 2),
        (TrajectoryModel.CUBIC_BSPLINE, 5),
        (TrajectoryModel.BEZIER7, 8),
    ])
    def test_global_left_multiplication(self, model, n):
        rng = np.random.default_rng(9)
        knots = random_knots(rng, n)
        g = random_knots(rng, 1)[0]
        traj = make_traj(model, knots, exposure=(0.0, 1.0))
        moved = make_traj(model, [se3.compose(g, k) for k in knots], exposure=(0.0, 1.0))
        for t in (0.0, 0.35, 0.8, 1.0):
            lhs = trajectory.eval_pose(moved, t)
            rhs = se3.compose(g, trajectory.eval_pose(traj, t))
            assert pose_close(lhs, rhs, tol=1e-9)


class TestSampleExposure:
    def test_n2_returns_endpoints(self):
        knots = random_knots(np.random.default_rng(10), 2)
        traj = make_traj(TrajectoryModel.LINEAR, knots, exposure=(0.2, 0.8))
        poses = trajectory.sample_exposure(traj, 2)
        assert pose_close(poses[0], trajectory.eval_pose(traj, 0.2))
        assert pose_close(poses[1], trajectory.eval_pose(traj, 0.8))

    def test_constant_trajectory_19_identical(self):
        p = random_knots(np.random.default_rng(11), 1)[0]
        traj = make_traj(TrajectoryModel.BEZIER7, [p] * 8)
        poses = trajectory.sample_exposure(traj, 19)
        assert len(poses) == 19
        assert all(pose_close(q, p) for q in poses)

    def test_linear_translation_midpoint_mean(self):
        knots = [SE3Pose(translation=[0.0, 1.0, 0.0]), SE3Pose(translation=[4.0, 1.0, 0.0])]
        traj = make_traj(TrajectoryModel.LINEAR, knots)
        poses = trajectory.sample_exposure(traj, 3)
        mid = 0.5 * (poses[0].translation + poses[2].translation)
        np.testing.assert_allclose(poses[1].translation, mid, atol=1e-12)

    def test_n_below_two_rejected(self):
        traj = make_traj(TrajectoryModel.LINEAR, random_knots(np.random.default_rng(12), 2))
        with pytest.raises(ValueError):
            trajectory.sample_exposure(traj, 1)


class TestKnotJacobian:
    @pytest.mark.parametrize("model,n", [
        (TrajectoryModel.LINEAR, 2),
        (TrajectoryModel.CUBIC_BSPLINE, 4),
        (TrajectoryModel.BEZIER7, 8),
    ])
    def test_matches_central_differences(self, model, n):
        rng = np.random.default_rng(13)
        knots = random_knots(rng, n, spread=0.2)
        traj = make_traj(model, knots, exposure=(0.0, 1.0))
        times = np.array([0.15, 0.5, 0.85])
        jac = trajectory.knot_jacobian(traj, times)

        h = 1e-6
        for s, t in enumerate(times):
            base = trajectory.eval_pose(traj, t)
            for j in range(n):
                for d in range(6):
                    delta = np.zeros(6)
                    fd_rows = []
                    for sign in (1.0, -1.0):
                        delta_s = delta.copy()
                        delta_s[d] = sign * h
                        moved = list(knots)
                        moved[j] = se3.compose(knots[j], se3.exp(Twist.from_vector(delta_s)))
                        ptraj = make_traj(model, moved, exposure=(0.0, 1.0))
                        rel = se3.relative_twist(base, trajectory.eval_pose(ptraj, t))
                        fd_rows.append(rel.as_vector())
                    fd = (fd_rows[0] - fd_rows[1]) / (2 * h)
                    got = jac[s, j, d]
                    # rows below 1e-3 are dominated by the FD oracle's own
                    # float64 roundoff (~5e-10); hold those to an absolute bound
                    if np.linalg.norm(fd) >= 1e-3:
                        assert np.linalg.norm(got - fd) / np.linalg.norm(fd) < 1e-5
                    else:
                        assert np.linalg.norm(got - fd) < 1e-8

    def test_constant_translation_sanity(self):
        # linear trajectory between pure translations: d pose / d knot1
        # translation at u is u * identity on the rho block
        knots = [SE3Pose(translation=[0.0, 0.0, 0.0]), SE3Pose(translation=[1.0, 0.0, 0.0])]
        traj = make_traj(TrajectoryModel.LINEAR, knots)
        jac = trajectory.knot_jacobian(traj, np.array([0.25]))
        np.testing.assert_allclose(jac[0, 1, :3, :3], 0.25 * np.eye(3), atol=1e-7)


class TestSerialization:
    @pytest.mark.parametrize("model,n", [
        (TrajectoryModel.LINEAR, 2),
        (TrajectoryModel.CUBIC_BSPLINE, 6),
        (TrajectoryModel.BEZIER7, 8),
    ])
    def test_roundtrip(self, tmp_path, model, n):
        rng = np.random.default_rng(14)
        traj = make_traj(model, random_knots(rng, n), exposure=(0.1, 0.9))
        path = tmp_path / "traj.txt"
        trajectory.save(path, traj)
        back = trajectory.load(path)
        assert back.model is traj.model
        assert back.exposure == traj.exposure
        assert back.t0 == traj.t0
        assert back.dt == traj.dt
        for a, b in zip(traj.knots, back.knots):
            np.testing.assert_array_equal(a.rotation, b.rotation)
            np.testing.assert_array_equal(a.translation, b.translation)

    def test_malformed_rejected(self):
        with pytest.raises(ValueError):
            trajectory.from_text("model bogus\nt0 0\ndt none\nexposure 0 1\nknots 0\n")
