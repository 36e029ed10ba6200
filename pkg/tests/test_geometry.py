import math

import numpy as np
import pytest

from parkslam.errors import DegenerateBaselineError, DegenerateInputError, OutOfModelError
from parkslam.geometry import (
    CameraRig,
    Pose,
    axis_angle_to_quat,
    compose,
    default_intrinsics,
    default_rig,
    equidistant_pixels,
    inverse,
    pixel_in_bounds,
    project,
    quat_from_axis_angle,
    quat_from_matrix,
    quat_from_yaw,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    relative,
    rotation_angle_rad,
    triangulate,
    unproject,
)


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_pose(rng, t_scale=5.0):
    return Pose(random_quat(rng), rng.normal(scale=t_scale, size=3))


def assert_pose_close(a, b, tol_t=1e-9, tol_rad=1e-9):
    assert np.linalg.norm(a.t - b.t) < tol_t
    d = relative(a, b)
    assert rotation_angle_rad(d.q) < tol_rad


class TestQuaternions:
    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = random_quat(rng)
            v = rng.normal(size=3)
            np.testing.assert_allclose(quat_rotate(q, v), quat_to_matrix(q) @ v, atol=1e-12)

    def test_multiply_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            qa, qb = random_quat(rng), random_quat(rng)
            np.testing.assert_allclose(
                quat_to_matrix(quat_multiply(qa, qb)),
                quat_to_matrix(qa) @ quat_to_matrix(qb),
                atol=1e-12,
            )

    def test_from_matrix_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            q = random_quat(rng)
            q2 = quat_from_matrix(quat_to_matrix(q))
            assert abs(abs(float(q @ q2)) - 1.0) < 1e-12

    def test_from_matrix_covers_all_branches(self):
        # Rotations by pi about each axis exercise the trace <= 0 branches.
        for axis in np.eye(3):
            q = quat_from_axis_angle(axis, math.pi)
            q2 = quat_from_matrix(quat_to_matrix(q))
            assert abs(abs(float(q @ q2)) - 1.0) < 1e-12

    def test_yaw_quaternion(self):
        q = quat_from_yaw(math.pi / 2)
        np.testing.assert_allclose(quat_rotate(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_axis_angle_vector_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            rvec = rng.uniform(1e-6, math.pi - 1e-6) * direction
            q = axis_angle_to_quat(rvec)
            assert abs(rotation_angle_rad(q) - np.linalg.norm(rvec)) < 1e-9
        np.testing.assert_allclose(axis_angle_to_quat(np.zeros(3)), [1, 0, 0, 0], atol=0)

    def test_zero_axis_rejected(self):
        with pytest.raises(ValueError):
            quat_from_axis_angle(np.zeros(3), 1.0)


class TestPose:
    def test_compose_matches_homogeneous_matrices(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose(
                compose(a, b).to_matrix(), a.to_matrix() @ b.to_matrix(), atol=1e-10
            )

    def test_transform_matches_matrix(self):
        rng = np.random.default_rng(11)
        p = random_pose(rng)
        pts = rng.normal(size=(50, 3))
        hom = np.c_[pts, np.ones(50)]
        np.testing.assert_allclose(p.transform(pts), (p.to_matrix() @ hom.T).T[:, :3], atol=1e-10)

    def test_inverse(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            p = random_pose(rng)
            assert_pose_close(compose(p, inverse(p)), Pose.identity(), 1e-9, 1e-9)
            assert_pose_close(compose(inverse(p), p), Pose.identity(), 1e-9, 1e-9)

    def test_relative(self):
        rng = np.random.default_rng(13)
        a, b = random_pose(rng), random_pose(rng)
        assert_pose_close(compose(a, relative(a, b)), b, 1e-9, 1e-9)

    def test_norm_stable_over_long_chains(self):
        rng = np.random.default_rng(14)
        p = Pose.identity()
        step = random_pose(rng, t_scale=0.1)
        for _ in range(10_000):
            p = compose(p, step)
        assert abs(float(np.linalg.norm(p.q)) - 1.0) < 1e-9

    def test_normalizes_scaled_quaternion(self):
        q = np.array([2.0, 0.0, 0.0, 0.0])
        p = Pose(q, np.zeros(3))
        np.testing.assert_allclose(p.q, [1, 0, 0, 0], atol=0)

    def test_unit_quaternion_kept_bit_identical(self):
        rng = np.random.default_rng(15)
        q = random_quat(rng)
        p = Pose(q, np.zeros(3))
        assert p.q.tobytes() == q.tobytes()

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.zeros(4), np.zeros(3))

    def test_fields_read_only(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.t[0] = 1.0

    def test_from_yaw_position(self):
        p = Pose.from_yaw_position(math.pi / 2, [10.0, 20.0, 0.0])
        np.testing.assert_allclose(p.transform([1.0, 0.0, 0.0]), [10.0, 21.0, 0.0], atol=1e-12)


class TestProjection:
    def setup_method(self):
        self.intr = default_intrinsics()

    def test_optical_axis_hits_principal_point(self):
        px = project(self.intr, Pose.identity(), [0.0, 0.0, 7.0])
        np.testing.assert_allclose(px, [640.0, 400.0], atol=1e-12)

    def test_45_degree_point(self):
        px = project(self.intr, Pose.identity(), [1.0, 0.0, 1.0])
        np.testing.assert_allclose(px, [640.0 + 300.0 * math.pi / 4.0, 400.0], atol=1e-9)

    def test_radius_scales_linearly_with_theta(self):
        for deg in (10, 30, 60, 90):
            theta = math.radians(deg)
            px = project(self.intr, Pose.identity(), [math.sin(theta), 0.0, math.cos(theta)])
            assert abs((px[0] - 640.0) - 300.0 * theta) < 1e-9

    def test_beyond_theta_max_is_none(self):
        theta = math.radians(120)
        assert project(self.intr, Pose.identity(), [math.sin(theta), 0.0, math.cos(theta)]) is None

    def test_behind_camera_wide_fov(self):
        # 95 deg theta_max admits points slightly behind the image plane.
        theta = math.radians(94)
        px = project(self.intr, Pose.identity(), [math.sin(theta), 0.0, math.cos(theta)])
        assert px is not None and px[0] > 640.0

    def test_out_of_bounds_is_none(self):
        theta = math.radians(80)  # r = 418.9 px > 400 px of vertical headroom
        assert project(self.intr, Pose.identity(), [0.0, math.sin(theta), math.cos(theta)]) is None

    def test_camera_center_raises(self):
        with pytest.raises(DegenerateInputError):
            project(self.intr, Pose.identity(), [0.0, 0.0, 0.0])

    def test_projection_frame_invariance(self):
        rng = np.random.default_rng(20)
        hits = 0
        for _ in range(100):
            cam_from_world = random_pose(rng)
            point = rng.normal(scale=8.0, size=3)
            if np.linalg.norm(cam_from_world.transform(point)) < 1e-3:
                continue
            frame = random_pose(rng)
            a = project(self.intr, cam_from_world, point)
            b = project(
                self.intr, compose(cam_from_world, inverse(frame)), frame.transform(point)
            )
            if a is None:
                assert b is None
            else:
                hits += 1
                np.testing.assert_allclose(a, b, atol=1e-6)
        assert hits > 10

    def test_unproject_round_trip(self):
        rng = np.random.default_rng(21)
        n = 0
        while n < 1000:
            pixel = rng.uniform([0, 0], [1280, 800])
            r = np.linalg.norm(pixel - [640, 400])
            if r / 300.0 > self.intr.theta_max:
                continue
            n += 1
            ray = unproject(self.intr, pixel)
            assert abs(float(np.linalg.norm(ray)) - 1.0) < 1e-12
            depth = rng.uniform(0.5, 30.0)
            back = project(self.intr, Pose.identity(), ray * depth)
            assert back is not None
            np.testing.assert_allclose(back, pixel, atol=1e-6)

    def test_unproject_center(self):
        np.testing.assert_allclose(unproject(self.intr, [640.0, 400.0]), [0, 0, 1], atol=0)

    def test_unproject_outside_model_raises(self):
        with pytest.raises(OutOfModelError):
            unproject(self.intr, [640.0 + 300.0 * math.radians(96), 400.0])

    def test_equidistant_pixels_matches_scalar(self):
        rng = np.random.default_rng(22)
        pts = rng.normal(scale=5.0, size=(200, 3))
        pixels, theta = equidistant_pixels(self.intr, pts)
        in_bounds = pixel_in_bounds(self.intr, pixels)
        for p, px, th, ok in zip(pts, pixels, theta, in_bounds):
            scalar = project(self.intr, Pose.identity(), p)
            if th <= self.intr.theta_max and ok:
                np.testing.assert_allclose(scalar, px, atol=1e-9)
            else:
                assert scalar is None

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            default_intrinsics(focal=-1.0)
        with pytest.raises(ValueError):
            default_intrinsics(theta_max_deg=200.0)
        with pytest.raises(ValueError):
            default_intrinsics(image_size=(0, 800))


class TestTriangulation:
    def rig_rays(self, rng, point, n_cams=3, spread=4.0):
        obs = []
        for _ in range(n_cams):
            center = rng.normal(scale=spread, size=3)
            cam_from_world = compose(Pose(random_quat(rng), np.zeros(3)), Pose(t=-center))
            ray = cam_from_world.transform(point)
            obs.append((cam_from_world, ray / np.linalg.norm(ray)))
        return obs

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(30)
        for _ in range(100):
            point = rng.normal(scale=10.0, size=3)
            obs = self.rig_rays(rng, point)
            try:
                x = triangulate(obs)
            except DegenerateBaselineError:
                continue
            assert np.linalg.norm(x - point) < 1e-9

    def test_needs_two_observations(self):
        rng = np.random.default_rng(31)
        obs = self.rig_rays(rng, np.array([1.0, 2.0, 3.0]), n_cams=1)
        with pytest.raises(ValueError):
            triangulate(obs)

    def test_zero_baseline_raises(self):
        pose = Pose.identity()
        ray = np.array([0.0, 0.0, 1.0])
        with pytest.raises(DegenerateBaselineError):
            triangulate([(pose, ray), (pose, ray)])

    def test_near_parallel_raises(self):
        # 1 mm baseline against a 100 m far point: well under the angle floor.
        far = np.array([0.0, 0.0, 100.0])
        a = Pose(t=[0.0, 0.0, 0.0])
        b = Pose(t=[-0.001, 0.0, 0.0])
        ray_a = far / np.linalg.norm(far)
        pb = b.transform(far)
        with pytest.raises(DegenerateBaselineError):
            triangulate([(a, ray_a), (b, pb / np.linalg.norm(pb))])

    def test_minimizes_sum_of_squared_ray_distances(self):
        rng = np.random.default_rng(32)
        point = np.array([1.0, -2.0, 8.0])
        obs = self.rig_rays(rng, point, n_cams=4)
        # Perturb rays so the optimum is strictly interior, then check the
        # gradient of the squared-distance objective vanishes at the solution.
        noisy = []
        centers, dirs = [], []
        for cam_from_world, ray in obs:
            ray = ray + rng.normal(scale=1e-3, size=3)
            ray /= np.linalg.norm(ray)
            noisy.append((cam_from_world, ray))
            world_from_cam = inverse(cam_from_world)
            centers.append(world_from_cam.t)
            dirs.append(quat_rotate(world_from_cam.q, ray))
        x = triangulate(noisy)
        grad = np.zeros(3)
        for c, d in zip(centers, dirs):
            m = np.eye(3) - np.outer(d, d)
            grad += 2.0 * m @ (x - c)
        assert np.linalg.norm(grad) < 1e-9

    def test_noise_error_regression(self):
        # Pixel-noise Monte Carlo through the full project/unproject chain:
        # rig-scale baselines (2-5 m), points at 4-12 m, 0.5 px noise.
        rng = np.random.default_rng(33)
        intr = default_intrinsics()
        errors = []
        while len(errors) < 300:
            point = rng.uniform([-12, -12, 0], [12, 12, 3])
            obs = []
            for _ in range(3):
                center = rng.uniform([-2.5, -2.5, 0.4], [2.5, 2.5, 1.2])
                look = point - center
                if np.linalg.norm(look) < 4.0:
                    continue
                z = look / np.linalg.norm(look)
                y = np.array([0.0, 0.0, -1.0])
                x_ax = np.cross(y, z)
                if np.linalg.norm(x_ax) < 1e-6:
                    continue
                x_ax /= np.linalg.norm(x_ax)
                r = np.column_stack([x_ax, np.cross(z, x_ax), z]).T
                cam_from_world = Pose(quat_from_matrix(r), -r @ center)
                pixel = project(intr, cam_from_world, point)
                if pixel is None:
                    continue
                noisy_px = pixel + rng.normal(scale=0.5, size=2)
                if not pixel_in_bounds(intr, noisy_px[None, :])[0]:
                    continue
                obs.append((cam_from_world, unproject(intr, noisy_px)))
            if len(obs) < 3:
                continue
            try:
                x = triangulate(obs)
            except DegenerateBaselineError:
                continue
            errors.append(float(np.linalg.norm(x - point)))
        errors = np.array(errors)
        # Frozen from a 300-sample run: median 0.056 m, p95 0.42 m.
        assert np.median(errors) < 0.09
        assert np.quantile(errors, 0.95) < 0.60


class TestRig:
    def test_default_rig_geometry(self):
        rig = default_rig()
        expected = {
            "front": [3.7, 0.0, 0.6],
            "rear": [-1.0, 0.0, 0.9],
            "left": [1.9, 1.0, 1.0],
            "right": [1.9, -1.0, 1.0],
        }
        for cam_id, center in expected.items():
            cam = rig.camera(cam_id)
            np.testing.assert_allclose(cam.center_in_vehicle(), center, atol=1e-12)

    def test_cameras_look_outward(self):
        rig = default_rig()
        looks = {
            "front": [1.0, 0.0, 0.0],
            "rear": [-1.0, 0.0, 0.0],
            "left": [0.0, 1.0, 0.0],
            "right": [0.0, -1.0, 0.0],
        }
        for cam_id, look in looks.items():
            cam = rig.camera(cam_id)
            point = cam.center_in_vehicle() + 10.0 * np.asarray(look)
            px = project(cam.intrinsics, cam.cam_from_vehicle, point)
            np.testing.assert_allclose(px, [640.0, 400.0], atol=1e-9)

    def test_image_y_points_down(self):
        rig = default_rig()
        cam = rig.camera("front")
        ground = np.array([13.7, 0.0, 0.0])  # below the camera axis
        px = project(cam.intrinsics, cam.cam_from_vehicle, ground)
        assert px is not None and px[1] > 400.0

    def test_rig_rejects_wrong_ids(self):
        rig = default_rig()
        cams = [c for c in rig.cameras if c.camera_id != "rear"]
        cams.append(rig.camera("front"))
        with pytest.raises(ValueError):
            CameraRig(cams)

    def test_unknown_camera_id(self):
        with pytest.raises(KeyError):
            default_rig().camera("top")
