import math
import re

import numpy as np
import pytest
from test_ba import make_problem, tangent_step

from parkslam.ba import BAConfig, reprojection_residuals
from parkslam.errors import BootstrapError, PoseEstimationError, TrackingLostError
from parkslam.geometry import (
    Pose,
    compose,
    default_rig,
    relative,
    rotation_angle_rad,
)
from parkslam.map_store import (
    MapLandmark,
    load_map,
    maps_equal,
    save_map,
    validate_map,
)
from parkslam.simworld import (
    FrameObservations,
    PerturbationSpec,
    TrajectorySpec,
    generate_trajectory,
    generate_world,
    render_observations,
    render_session,
)
from parkslam.training import (
    TrainingState,
    bundle_adjust,
    estimate_pose,
    is_keyframe,
    point_cloud_text,
    track_frame,
    train,
    windowed_ba,
)

STATIC_MIX = {"building": 0.5, "curb": 0.2, "road_marking": 0.2, "vegetation": 0.1}


def rotation_deg(a, b):
    return math.degrees(rotation_angle_rad(relative(a, b).q))


def exact_matches(seed=30, n_lm=40):
    """Ground-truth 2D-3D matches for a single pose, via the BA test builder."""
    keyframes, landmarks, rig, _, _ = make_problem(seed=seed, n_kf=1, n_lm=n_lm)
    kf = keyframes[0]
    matches = [
        (landmarks[o.landmark_id].position, o.pixel.copy(), o.camera_id, o.weight)
        for o in kf.observations
    ]
    return matches, rig, kf.pose


class TestEstimatePose:
    def test_exact_matches_ground_truth_seed(self):
        matches, rig, gt = exact_matches()
        pose, mask = estimate_pose(matches, rig, gt)
        assert np.array_equal(pose.q, gt.q)
        assert np.array_equal(pose.t, gt.t)
        assert mask.all()

    def test_thirty_percent_outliers(self):
        matches, rig, gt = exact_matches(seed=31, n_lm=60)
        rng = np.random.default_rng(32)
        n = len(matches)
        corrupt = rng.choice(n, size=int(0.3 * n), replace=False)
        for i in corrupt:
            pos, pix, camera_id, w = matches[i]
            jump = rng.uniform(30.0, 120.0, 2) * rng.choice([-1.0, 1.0], 2)
            matches[i] = (pos, pix + jump, camera_id, w)
        seed_pose = tangent_step(gt, np.array([0.15, -0.1, 0.05, 0.01, -0.015, 0.02]))
        pose, mask = estimate_pose(matches, rig, seed_pose, seed=7)
        assert np.linalg.norm(pose.t - gt.t) < 0.02
        assert rotation_deg(pose, gt) < 0.2
        assert not mask[corrupt].any()
        clean = np.setdiff1d(np.arange(n), corrupt)
        assert mask[clean].mean() > 0.95

    def test_three_matches_arity_error(self):
        matches, rig, gt = exact_matches()
        with pytest.raises(ValueError, match="4"):
            estimate_pose(matches[:3], rig, gt)

    def test_low_inlier_ratio_fails(self):
        matches, rig, gt = exact_matches(seed=33, n_lm=60)
        rng = np.random.default_rng(34)
        n = len(matches)
        corrupt = rng.choice(n, size=int(0.8 * n), replace=False)
        for i in corrupt:
            pos, pix, camera_id, w = matches[i]
            jump = rng.uniform(60.0, 200.0, 2) * rng.choice([-1.0, 1.0], 2)
            matches[i] = (pos, pix + jump, camera_id, w)
        with pytest.raises(PoseEstimationError, match="ratio"):
            estimate_pose(matches, rig, gt, seed=8)

    def test_zero_weight_matches_cannot_influence_pose(self):
        matches, rig, gt = exact_matches(seed=35, n_lm=40)
        seed_pose = tangent_step(gt, np.array([0.1, 0.05, -0.02, 0.005, 0.01, -0.008]))
        pose_a, mask_a = estimate_pose(matches, rig, seed_pose, seed=3)

        rng = np.random.default_rng(36)
        spiked = list(matches)
        zero_rows = []
        for k in range(8):
            i = int(rng.integers(0, len(matches)))
            pos, pix, camera_id, _ = matches[i]
            wild = pix + rng.uniform(-300.0, 300.0, 2)
            spiked.insert(2 * k, (pos + rng.normal(size=3), wild, camera_id, 0.0))
            zero_rows.append(2 * k)
        pose_b, mask_b = estimate_pose(spiked, rig, seed_pose, seed=3)
        assert pose_a.q.tobytes() == pose_b.q.tobytes()
        assert pose_a.t.tobytes() == pose_b.t.tobytes()
        assert not mask_b[zero_rows].any()
        assert mask_a.sum() == mask_b.sum()

    def test_deterministic_given_seed(self):
        matches, rig, gt = exact_matches(seed=37, n_lm=50)
        rng = np.random.default_rng(38)
        for i in rng.choice(len(matches), size=12, replace=False):
            pos, pix, camera_id, w = matches[i]
            matches[i] = (pos, pix + rng.uniform(20.0, 90.0, 2), camera_id, w)
        seed_pose = tangent_step(gt, np.array([0.1, -0.08, 0.03, 0.01, 0.0, -0.01]))
        pose_a, mask_a = estimate_pose(matches, rig, seed_pose, seed=11)
        pose_b, mask_b = estimate_pose(matches, rig, seed_pose, seed=11)
        assert pose_a.q.tobytes() == pose_b.q.tobytes()
        assert pose_a.t.tobytes() == pose_b.t.tobytes()
        assert np.array_equal(mask_a, mask_b)


class TestIsKeyframe:
    def test_zero_motion(self):
        p = Pose.from_yaw_position(0.3, (1.0, 2.0, 0.0))
        assert not is_keyframe(p, p, 0.5, 5.0)

    def test_translation_trigger(self):
        a = Pose.identity()
        b = Pose.from_yaw_position(0.0, (1.0, 0.0, 0.0))
        assert is_keyframe(b, a, 0.5, 5.0)
        c = Pose.from_yaw_position(0.0, (0.49, 0.0, 0.0))
        assert not is_keyframe(c, a, 0.5, 5.0)

    def test_rotation_trigger(self):
        a = Pose.identity()
        b = Pose.from_yaw_position(math.radians(10.0), (0.0, 0.0, 0.0))
        assert is_keyframe(b, a, 0.5, 5.0)
        c = Pose.from_yaw_position(math.radians(4.9), (0.0, 0.0, 0.0))
        assert not is_keyframe(c, a, 0.5, 5.0)

    def test_threshold_validation(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            is_keyframe(p, p, 0.0, 5.0)
        with pytest.raises(ValueError):
            is_keyframe(p, p, 0.5, -1.0)


def state_from_world(world, rig, last_pose, prev_pose=None):
    landmarks = [
        MapLandmark(lm.landmark_id, lm.position.copy(), lm.descriptor, lm.semantic_class, 2)
        for lm in world.landmarks
    ]
    return TrainingState(
        rig, BAConfig(), landmarks=landmarks, last_pose=last_pose, prev_pose=prev_pose
    )


class TestTrackFrame:
    def setup_method(self):
        self.rig = default_rig()
        self.world = generate_world(300, (40, 30, 5), STATIC_MIX, seed=40)
        self.traj = generate_trajectory(TrajectorySpec("home_park", 12.0, 0.25))

    def test_noiseless_self_consistency(self):
        state = state_from_world(self.world, self.rig, self.traj[0])
        frame = render_observations(
            self.world, self.rig, self.traj[1], PerturbationSpec(), seed=41, frame_index=1
        )
        pose = track_frame(state, frame, self.rig)
        assert np.linalg.norm(pose.t - self.traj[1].t) < 1e-6
        assert rotation_deg(pose, self.traj[1]) < 1e-5
        assert state.last_pose is pose

    def test_seeded_noise_regression(self):
        state = state_from_world(self.world, self.rig, self.traj[0])
        frame = render_observations(
            self.world,
            self.rig,
            self.traj[1],
            PerturbationSpec(pixel_noise_sigma=0.5),
            seed=42,
            frame_index=1,
        )
        pose = track_frame(state, frame, self.rig)
        assert np.linalg.norm(pose.t - self.traj[1].t) < 0.05

    def test_all_dynamic_map_loses_tracking(self):
        world = generate_world(120, (40, 30, 5), {"vehicle": 0.6, "pedestrian": 0.4}, seed=43)
        state = state_from_world(world, self.rig, self.traj[0])
        frame = render_observations(
            world, self.rig, self.traj[1], PerturbationSpec(), seed=44, frame_index=1
        )
        with pytest.raises(TrackingLostError) as info:
            track_frame(state, frame, self.rig)
        assert info.value.frame_index == 1

    def test_small_map_is_a_precondition_violation(self):
        world = generate_world(5, (40, 30, 5), STATIC_MIX, seed=45)
        state = state_from_world(world, self.rig, self.traj[0])
        frame = render_observations(
            world, self.rig, self.traj[1], PerturbationSpec(), seed=46, frame_index=1
        )
        with pytest.raises(ValueError, match="10 landmarks"):
            track_frame(state, frame, self.rig)

    def test_constant_velocity_prediction(self):
        a = Pose.from_yaw_position(0.1, (1.0, 0.5, 0.0))
        b = Pose.from_yaw_position(0.2, (2.0, 0.8, 0.0))
        state = TrainingState(self.rig, BAConfig(), last_pose=b, prev_pose=a)
        pred = state.predicted_pose()
        expected = compose(b, relative(a, b))
        assert np.allclose(pred.q, expected.q)
        assert np.allclose(pred.t, expected.t)


def perturbed_problem(seed, **kwargs):
    keyframes, landmarks, rig, _, _ = make_problem(seed=seed, **kwargs)
    rng = np.random.default_rng(seed + 1000)
    for lm in landmarks:
        lm.position = lm.position + rng.normal(scale=0.03, size=3)
    for kf in keyframes[1:]:
        kf.pose = tangent_step(kf.pose, rng.normal(scale=0.005, size=6))
    return keyframes, landmarks, rig


class TestWindowedBA:
    def test_window_covering_all_equals_global(self):
        kfs_a, lms_a, rig = perturbed_problem(50)
        kfs_b, lms_b, _ = perturbed_problem(50)
        cfg = BAConfig(window_n=10)
        state = TrainingState(rig, cfg, keyframes=kfs_a, landmarks=lms_a)
        windowed_ba(state)
        bundle_adjust(kfs_b, lms_b, rig, cfg, fixed={0})
        for ka, kb in zip(kfs_a, kfs_b):
            assert ka.pose.q.tobytes() == kb.pose.q.tobytes()
            assert ka.pose.t.tobytes() == kb.pose.t.tobytes()
        for la, lb in zip(lms_a, lms_b):
            assert la.position.tobytes() == lb.position.tobytes()

    def test_poses_outside_window_bit_identical(self):
        kfs, lms, rig = perturbed_problem(51)
        cfg = BAConfig(window_n=2)
        state = TrainingState(rig, cfg, keyframes=kfs, landmarks=lms)
        frozen = [(kf.pose.q.tobytes(), kf.pose.t.tobytes()) for kf in kfs[:3]]
        inside_before = [kf.pose.t.copy() for kf in kfs[3:]]
        windowed_ba(state)
        for kf, (qb, tb) in zip(kfs[:3], frozen):
            assert kf.pose.q.tobytes() == qb
            assert kf.pose.t.tobytes() == tb
        moved = [
            np.any(kf.pose.t != before) for kf, before in zip(kfs[3:], inside_before)
        ]
        assert any(moved)

    def test_windowed_rmse_decreases(self):
        keyframes, landmarks, rig, _, _ = make_problem(seed=52, noise_px=0.8)
        rng = np.random.default_rng(53)
        for lm in landmarks:
            lm.position = lm.position + rng.normal(scale=0.05, size=3)
        for kf in keyframes[1:]:
            kf.pose = tangent_step(kf.pose, rng.normal(scale=0.01, size=6))
        _, cost_before = reprojection_residuals(keyframes, landmarks, rig)
        state = TrainingState(rig, BAConfig(window_n=5), keyframes=keyframes, landmarks=landmarks)
        windowed_ba(state)
        _, cost_after = reprojection_residuals(keyframes, landmarks, rig)
        assert cost_after < cost_before

    def test_needs_two_keyframes(self):
        kfs, lms, rig = perturbed_problem(54, n_kf=2, n_lm=20)
        state = TrainingState(rig, BAConfig(), keyframes=kfs[:1], landmarks=lms)
        with pytest.raises(ValueError, match="2 keyframes"):
            windowed_ba(state)


@pytest.fixture(scope="module")
def park_setup():
    rig = default_rig()
    world = generate_world(350, (40, 30, 5), STATIC_MIX, seed=5)
    traj = generate_trajectory(TrajectorySpec("home_park", 20.0, 0.4))
    return rig, world, traj


@pytest.fixture(scope="module")
def noiseless_map(park_setup):
    rig, world, traj = park_setup
    frames = render_session(world, rig, traj, PerturbationSpec(), seed=9)
    return train(frames, rig, BAConfig(), scenario_name="home", training_seed=9)


@pytest.fixture(scope="module")
def noisy_map(park_setup):
    rig, world, traj = park_setup
    frames = render_session(
        world, rig, traj, PerturbationSpec(pixel_noise_sigma=0.5), seed=9
    )
    return train(frames, rig, BAConfig(), scenario_name="home-noisy", training_seed=9)


def trajectory_length(points):
    pts = np.asarray(points)
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


class TestTrain:
    def test_noiseless_global_rmse(self, noiseless_map):
        assert noiseless_map.global_ba_report.final_rmse_px < 1e-6
        assert noiseless_map.global_ba_report.converged

    def test_noiseless_keyframe_poses_match_ground_truth(self, noiseless_map, park_setup):
        _, _, traj = park_setup
        errs = [
            np.linalg.norm(kf.pose.t - traj[kf.frame_index].t)
            for kf in noiseless_map.keyframes
        ]
        assert max(errs) < 1e-4

    def test_scale_ratio(self, noiseless_map, noisy_map, park_setup):
        _, _, traj = park_setup
        for trained in (noiseless_map, noisy_map):
            est = trajectory_length([kf.pose.t for kf in trained.keyframes])
            gt = trajectory_length([traj[kf.frame_index].t for kf in trained.keyframes])
            assert 0.99 <= est / gt <= 1.01

    def test_noisy_ate_regression(self, noisy_map, park_setup):
        _, _, traj = park_setup
        errs = [
            np.linalg.norm(kf.pose.t - traj[kf.frame_index].t) ** 2
            for kf in noisy_map.keyframes
        ]
        ate = math.sqrt(sum(errs) / len(errs))
        assert ate < 0.05

    def test_keyframe_spacing_scan(self, noiseless_map, noisy_map):
        for trained, slack in ((noiseless_map, 1e-6), (noisy_map, 0.02)):
            for prev, curr in zip(trained.keyframes, trained.keyframes[1:]):
                rel = relative(prev.pose, curr.pose)
                dist = float(np.linalg.norm(rel.t))
                ang = math.degrees(rotation_angle_rad(rel.q))
                assert dist >= 0.5 - slack or ang >= 5.0 - slack

    def test_start_pose_pinned(self, noiseless_map, park_setup):
        _, _, traj = park_setup
        kf0 = noiseless_map.keyframes[0]
        assert kf0.pose.q.tobytes() == traj[0].q.tobytes()
        assert kf0.pose.t.tobytes() == traj[0].t.tobytes()
        meta = noiseless_map.metadata
        assert meta.start_pose.t.tobytes() == traj[0].t.tobytes()
        assert meta.global_ba_done

    def test_map_valid_and_round_trips(self, noiseless_map, tmp_path):
        validate_map(noiseless_map)
        path = tmp_path / "home.ttpm"
        save_map(noiseless_map, path)
        assert maps_equal(load_map(path), noiseless_map)

    def test_prune_invariants(self, noisy_map, park_setup):
        rig, _, _ = park_setup
        counts = {lm.landmark_id: 0 for lm in noisy_map.landmarks}
        for kf in noisy_map.keyframes:
            for obs in kf.observations:
                counts[obs.landmark_id] += 1
        for lm in noisy_map.landmarks:
            assert lm.observation_count == counts[lm.landmark_id]
            assert lm.observation_count >= 2

        res, _ = reprojection_residuals(noisy_map.keyframes, noisy_map.landmarks, rig)
        norms = np.linalg.norm(res, axis=1)
        err_sum = {lm.landmark_id: [0.0, 0] for lm in noisy_map.landmarks}
        i = 0
        for kf in noisy_map.keyframes:
            for obs in kf.observations:
                if obs.weight > 0:
                    err_sum[obs.landmark_id][0] += norms[i]
                    err_sum[obs.landmark_id][1] += 1
                i += 1
        # f32 pixel quantization adds at most a few 1e-5 px on top of the gate
        for total, cnt in err_sum.values():
            if cnt:
                assert total / cnt <= 4.0 + 1e-3

    def test_single_frame_session_bootstrap_error(self, park_setup):
        rig, world, traj = park_setup
        frames = [
            render_observations(world, rig, traj[0], PerturbationSpec(), seed=9)
        ]
        with pytest.raises(BootstrapError):
            train(frames, rig, BAConfig())
        with pytest.raises(BootstrapError):
            train([], rig, BAConfig())

    def test_sparse_first_frame_bootstrap_error(self, park_setup):
        rig, _, traj = park_setup
        world = generate_world(6, (40, 30, 5), STATIC_MIX, seed=60)
        frames = render_session(world, rig, traj[:8], PerturbationSpec(), seed=61)
        with pytest.raises(BootstrapError, match="landmark"):
            train(frames, rig, BAConfig())

    def test_tracking_lost_carries_frame_index(self, park_setup):
        rig, world, traj = park_setup
        frames = render_session(world, rig, traj[:10], PerturbationSpec(), seed=9)
        for frame in frames[5:]:
            frame.cameras = {}
        with pytest.raises(TrackingLostError) as info:
            train(frames, rig, BAConfig())
        assert info.value.frame_index == 5

    def test_diagnostics_lines(self, park_setup):
        rig, world, traj = park_setup
        frames = render_session(world, rig, traj[:20], PerturbationSpec(), seed=9)
        lines = []
        trained = train(frames, rig, BAConfig(), on_keyframe=lines.append)
        assert len(lines) == len(trained.keyframes)
        pattern = re.compile(
            r"^kf \d+ frame \d+ pose( -?[\d.e+-]+){7} inliers \d+ rmse -?[\d.e+-]+$"
        )
        for line in lines:
            assert pattern.match(line), line

    def test_point_cloud_text(self, noiseless_map):
        text = point_cloud_text(noiseless_map)
        lines = text.strip().splitlines()
        assert len(lines) == len(noiseless_map.landmarks)
        first = lines[0].split()
        assert len(first) == 4
        np.testing.assert_allclose(
            [float(v) for v in first[:3]], noiseless_map.landmarks[0].position
        )
        assert first[3].isdigit()

    def test_training_is_deterministic(self):
        rig = default_rig()
        world = generate_world(150, (30, 24, 5), STATIC_MIX, seed=70)
        traj = generate_trajectory(TrajectorySpec("home_park", 8.0, 0.4))
        runs = []
        for _ in range(2):
            frames = render_session(world, rig, traj, PerturbationSpec(pixel_noise_sigma=0.3), seed=71)
            runs.append(train(frames, rig, BAConfig(), scenario_name="det", training_seed=71))
        assert maps_equal(runs[0], runs[1])

    def test_odometry_prior_hook_is_used(self, park_setup):
        rig, world, traj = park_setup
        frames = render_session(world, rig, traj[:16], PerturbationSpec(), seed=9)
        seen = []

        def prior(frame_index):
            seen.append(frame_index)
            return traj[frame_index]

        trained = train(frames, rig, BAConfig(), odometry_prior=prior)
        assert seen == [f.frame_index for f in frames[1:]]
        assert len(trained.keyframes) >= 2
