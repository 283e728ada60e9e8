import numpy as np
import pytest

from besplat import render, se3
from besplat.render import Camera, Gaussian, GaussianScene
from besplat.se3 import SE3Pose


def default_cam(w=16, h=16, f=40.0):
    return Camera(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)


def random_scene(rng, n, extent=1.0, depth=2.0):
    gaussians = []
    for _ in range(n):
        g = Gaussian.from_activated(
            mu=rng.uniform(-extent / 2, extent / 2, size=3) + [0.0, 0.0, depth],
            quat=rng.normal(size=4),
            scale=rng.uniform(0.03, 0.15, size=3) * extent,
            opacity=rng.uniform(0.3, 0.9),
            color=rng.uniform(0.1, 0.9, size=3),
        )
        gaussians.append(g)
    return GaussianScene.from_gaussians(gaussians)


def brute_force_composite(scene, pose, cam, background):
    """Direct per-pixel evaluation of the compositing sum, no cutoffs.

    Independent of the production path: explicit matrix inverses and a
    plain double loop over depth-sorted Gaussians.
    """
    w_rot = se3.quat_to_rot(pose.rotation)
    out = np.zeros((cam.height, cam.width, 3))
    cam_pos = scene.means @ w_rot.T + pose.translation
    order = sorted(range(len(scene)), key=lambda i: (cam_pos[i, 2], i))
    opac = scene.opacities()
    cols = scene.colors()
    per_g = []
    for i in order:
        x, y, z = cam_pos[i]
        if z <= render.DEFAULT_NEAR:
            continue
        mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2],
                        [0.0, cam.fy / z, -cam.fy * y / z**2]])
        cov3d = render.covariance3d(scene.quats[i], scene.scales()[i])
        cov2d = jac @ w_rot @ cov3d @ w_rot.T @ jac.T + render.COV2D_REG * np.eye(2)
        per_g.append((i, mean2d, np.linalg.inv(cov2d)))
    for iy in range(cam.height):
        for ix in range(cam.width):
            t = 1.0
            c = np.zeros(3)
            for i, mean2d, conic in per_g:
                d = np.array([ix, iy]) - mean2d
                alpha = min(opac[i] * np.exp(-0.5 * d @ conic @ d), render.ALPHA_MAX)
                c += cols[i] * alpha * t
                t *= 1.0 - alpha
            out[iy, ix] = c + np.asarray(background) * t
    return out


class TestCovariance3D:
    def test_identity(self):
        np.testing.assert_allclose(render.covariance3d([1, 0, 0, 0], [1, 1, 1]), np.eye(3))

    def test_axis_scales(self):
        np.testing.assert_allclose(
            render.covariance3d([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1.0, 1.0])
        )

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.normal(size=4)
            s = rng.uniform(0.2, 2.0, size=3)
            cov = render.covariance3d(q, s)
            np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(s**2),
                                       atol=1e-9)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            render.covariance3d([1, 0, 0, 0], [1.0, 0.0, 1.0])


class TestProjection:
    def test_on_axis_point(self):
        cam = Camera(fx=100, fy=100, cx=50, cy=50, width=101, height=101)
        g = Gaussian.from_activated([0, 0, 2.0], [1, 0, 0, 0], [0.1] * 3, 0.5, [0.5] * 3)
        p = render.project(g, SE3Pose.identity(), cam)
        np.testing.assert_allclose(p.mean2d, [50.0, 50.0], atol=1e-12)
        assert p.depth == pytest.approx(2.0)

    def test_isotropic_covariance_on_axis(self):
        cam = Camera(fx=100, fy=80, cx=50, cy=50, width=101, height=101)
        sigma = 0.05
        z = 2.5
        g = Gaussian.from_activated([0, 0, z], [1, 0, 0, 0], [sigma] * 3, 0.5, [0.5] * 3)
        p = render.project(g, SE3Pose.identity(), cam)
        expected = np.diag([(cam.fx * sigma / z) ** 2, (cam.fy * sigma / z) ** 2])
        expected += render.COV2D_REG * np.eye(2)
        np.testing.assert_allclose(p.cov2d, expected, atol=1e-9)

    def test_behind_camera_culled(self):
        cam = default_cam()
        g = Gaussian.from_activated([0, 0, -1.0], [1, 0, 0, 0], [0.1] * 3, 0.5, [0.5] * 3)
        assert render.project(g, SE3Pose.identity(), cam) is None


class TestRasterize:
    def test_empty_scene_black_background(self):
        cam = default_cam()
        img = render.render(GaussianScene.from_gaussians([]), SE3Pose.identity(), cam)
        assert img.shape == (16, 16, 3)
        np.testing.assert_array_equal(img, 0.0)

    def test_empty_scene_background_passthrough(self):
        cam = default_cam()
        bg = (0.2, 0.4, 0.6)
        img = render.render(GaussianScene.from_gaussians([]), SE3Pose.identity(), cam, bg)
        np.testing.assert_allclose(img, np.broadcast_to(bg, img.shape))

    def test_single_gaussian_centered_on_pixel(self):
        # center projects exactly onto pixel (8, 8): sigma = 0, alpha = o
        cam = Camera(fx=40, fy=40, cx=8, cy=8, width=17, height=17)
        o, c, bg = 0.7, np.array([0.9, 0.2, 0.4]), np.array([0.1, 0.1, 0.3])
        g = Gaussian.from_activated([0, 0, 2.0], [1, 0, 0, 0], [0.05] * 3, o, c)
        tape = render.rasterize([g], SE3Pose.identity(), cam, bg)
        got = tape.image[8, 8]
        o_act = g.opacity
        expected = g.color * o_act + bg * (1 - o_act)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_two_overlapping_gaussians_match_formula(self):
        cam = Camera(fx=40, fy=40, cx=8, cy=8, width=17, height=17)
        bg = np.array([0.05, 0.05, 0.05])
        g1 = Gaussian.from_activated([0.01, 0, 1.0], [1, 0, 0, 0], [0.03] * 3, 0.6, [0.8, 0.1, 0.1])
        g2 = Gaussian.from_activated([-0.01, 0, 2.0], [1, 0, 0, 0], [0.06] * 3, 0.8, [0.1, 0.1, 0.9])
        scene = GaussianScene.from_gaussians([g1, g2])
        tape = render.rasterize(scene, SE3Pose.identity(), cam, bg, exact=True)
        expected = brute_force_composite(scene, SE3Pose.identity(), cam, bg)
        np.testing.assert_allclose(tape.image, expected, atol=1e-12)

    def test_random_scene_matches_brute_force(self):
        rng = np.random.default_rng(1)
        cam = default_cam()
        scene = random_scene(rng, 8)
        bg = rng.uniform(0, 1, size=3)
        pose = SE3Pose.identity()
        img = render.render(scene, pose, cam, bg, exact=True)
        expected = brute_force_composite(scene, pose, cam, bg)
        np.testing.assert_allclose(img, expected, atol=1e-10)

    def test_color_range_invariant(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            scene = random_scene(np.random.default_rng(seed), 12)
            bg = rng.uniform(0, 1, size=3)
            img = render.render(scene, SE3Pose.identity(), default_cam(), bg)
            assert img.min() >= 0.0
            assert img.max() <= max(1.0, bg.max()) + 1e-12

    def test_tape_transmittance_monotone(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng, 10)
        tape = render.rasterize(scene, SE3Pose.identity(), default_cam(), (0, 0, 0))
        for iy in range(0, 16, 5):
            for ix in range(0, 16, 5):
                entries = tape.pixel_entries(ix, iy)
                trans = [e[2] for e in entries]
                assert all(a >= b - 1e-15 for a, b in zip(trans, trans[1:]))
                assert all(0.0 < e[1] <= 1.0 for e in entries)

    def test_forward_bit_reproducible(self):
        rng = np.random.default_rng(4)
        scene = random_scene(rng, 10)
        a = render.render(scene, SE3Pose.identity(), default_cam(), (0.1, 0.2, 0.3))
        b = render.render(scene, SE3Pose.identity(), default_cam(), (0.1, 0.2, 0.3))
        np.testing.assert_array_equal(a, b)

    def test_equal_depth_tie_break_by_index(self):
        cam = Camera(fx=40, fy=40, cx=8, cy=8, width=17, height=17)
        g1 = Gaussian.from_activated([0, 0, 2.0], [1, 0, 0, 0], [0.05] * 3, 0.6, [1e-6, 1e-6, 0.999999])
        g2 = Gaussian.from_activated([0, 0, 2.0], [1, 0, 0, 0], [0.05] * 3, 0.6, [0.999999, 1e-6, 1e-6])
        tape = render.rasterize([g1, g2], SE3Pose.identity(), cam, (0, 0, 0))
        entries = tape.pixel_entries(8, 8)
        assert [e[0] for e in entries] == [0, 1]

    def test_transmittance_stop_cuts_far_contributions(self):
        cam = Camera(fx=40, fy=40, cx=8, cy=8, width=17, height=17)
        # a stack of nearly opaque splats; the far one lands behind the stop
        gaussians = [
            Gaussian.from_activated([0, 0, 1.0 + 0.1 * i], [1, 0, 0, 0], [0.2] * 3, 0.95, [1 - 1e-9] * 3)
            for i in range(8)
        ]
        tape = render.rasterize(gaussians, SE3Pose.identity(), cam, (0, 0, 0))
        entries = tape.pixel_entries(8, 8)
        assert entries[-1][2] < 1e-4  # deepest prefix fell below the stop


class TestRenderGray:
    def test_white_is_one(self):
        cam = default_cam()
        gray = render.render_gray(GaussianScene.from_gaussians([]), SE3Pose.identity(),
                                  cam, (1.0, 1.0, 1.0))
        np.testing.assert_allclose(gray, 1.0, atol=1e-12)

    def test_pure_red_weight(self):
        cam = default_cam()
        r = 0.63
        gray = render.render_gray(GaussianScene.from_gaussians([]), SE3Pose.identity(),
                                  cam, (r, 0.0, 0.0))
        np.testing.assert_allclose(gray, 0.299 * r, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, size=(8, 8, 3))
        np.testing.assert_allclose(render.to_gray(0.37 * img), 0.37 * render.to_gray(img),
                                   atol=1e-14)


class TestSceneSerialization:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        scene = random_scene(rng, 7)
        path = tmp_path / "scene.txt"
        render.save_scene(path, scene)
        back = render.load_scene(path)
        np.testing.assert_array_equal(back.means, scene.means)
        np.testing.assert_array_equal(back.quats, scene.quats)
        np.testing.assert_array_equal(back.log_scales, scene.log_scales)
        np.testing.assert_array_equal(back.opacity_logits, scene.opacity_logits)
        np.testing.assert_array_equal(back.color_logits, scene.color_logits)

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError):
            render.scene_from_text("nope\ncount 0\n")
