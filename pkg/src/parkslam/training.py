"""Training-phase pipeline: visual odometry against the growing map, keyframe
selection, landmark triangulation, windowed bundle adjustment every
``window_n`` keyframes, and a final global bundle adjustment over all
keyframes that yields the persistent TrainedMap.

The map bootstraps from the first frame alone: the four rig cameras share
enough field of view that cross-camera matching plus triangulation over the
fixed inter-camera baselines seeds an initial metric landmark set.  From the
second frame on the pipeline tracks (constant-velocity prediction, descriptor
matching, RANSAC pose estimation), promotes frames to keyframes once motion
exceeds the translation or rotation threshold, and triangulates new landmarks
from observations the map could not explain.

Solver entry points (bundle_adjust, ba_jacobian, reprojection_residuals,
refine_pose, BAConfig) live in ``ba`` and are re-exported here; this module
owns the state machine around them.  Pixels stay float64 throughout training
and are only quantized to the float32 storage width when the TrainedMap is
assembled, so solver convergence is never limited by storage precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import features
from .ba import (
    BAConfig,
    BAReport,
    ba_jacobian,
    bundle_adjust,
    pose_residuals,
    refine_pose,
    reprojection_residuals,
)
from .errors import (
    BootstrapError,
    DegenerateBaselineError,
    OutOfModelError,
    PoseEstimationError,
    RankDeficiencyError,
    TrackingLostError,
)
from .geometry import (
    CAMERA_IDS,
    CameraRig,
    Pose,
    compose,
    equidistant_pixels,
    inverse,
    relative,
    rotation_angle_rad,
    triangulate,
    unproject,
)
from .map_store import (
    Keyframe,
    MapLandmark,
    MapMetadata,
    MapObservation,
    TrainedMap,
)

__all__ = [
    "BAConfig",
    "BAReport",
    "TrainingState",
    "ba_jacobian",
    "bundle_adjust",
    "estimate_pose",
    "is_keyframe",
    "point_cloud_text",
    "refine_pose",
    "reprojection_residuals",
    "track_frame",
    "train",
    "windowed_ba",
]

MIN_MAP_LANDMARKS = 10
MIN_TRACK_INLIERS = 6
RANSAC_ROUNDS = 32
RANSAC_SAMPLE = 4
INLIER_THRESHOLD_PX = 2.0
MIN_INLIER_RATIO = 0.3
DEFAULT_TRANS_THRESH_M = 0.5
DEFAULT_ROT_THRESH_DEG = 5.0
# candidate gates for map-to-frame matching, deliberately looser than the
# sensor's usable feature range so prediction error cannot starve tracking
TRACK_MAX_RANGE_M = 30.0
TRACK_FOV_MARGIN_RAD = 0.15
NEW_LANDMARK_MAX_REPROJ_PX = 4.0
NEW_LANDMARK_MAX_RANGE_M = 50.0
PRUNE_MAX_REPROJ_PX = 4.0
PRUNE_MIN_OBS = 2


@dataclass(eq=False)
class _Obs:
    """Training-time observation; same fields as MapObservation but the pixel
    keeps full float64 precision until the map is assembled."""

    camera_id: str
    pixel: np.ndarray
    landmark_id: int
    weight: float
    descriptor: bytes


@dataclass(eq=False)
class _Leftover:
    """A frame observation the map could not explain, kept one keyframe for
    temporal triangulation."""

    kf_index: int
    camera_id: str
    pixel: np.ndarray
    descriptor: bytes
    semantic_class: str


@dataclass(eq=False)
class _TrackResult:
    pose: Pose
    match_rows: list
    inlier_mask: np.ndarray
    matched_queries: dict
    n_inliers: int
    rmse_px: float


@dataclass(eq=False)
class TrainingState:
    """Single-writer state machine for the training pipeline."""

    rig: CameraRig
    config: BAConfig = field(default_factory=BAConfig)
    keyframes: list[Keyframe] = field(default_factory=list)
    landmarks: list[MapLandmark] = field(default_factory=list)
    last_pose: Pose | None = None
    prev_pose: Pose | None = None
    last_track: _TrackResult | None = None
    leftovers: list[_Leftover] = field(default_factory=list)
    odometry_prior: object = None  # optional callable(frame_index) -> Pose | None

    def predicted_pose(self) -> Pose:
        """Constant-velocity extrapolation from the last two tracked poses."""
        if self.last_pose is None:
            raise ValueError("no tracked pose yet; bootstrap the state first")
        if self.prev_pose is None:
            return self.last_pose
        return compose(self.last_pose, relative(self.prev_pose, self.last_pose))


def is_keyframe(
    current: Pose,
    last_keyframe: Pose,
    trans_thresh_m: float = DEFAULT_TRANS_THRESH_M,
    rot_thresh_deg: float = DEFAULT_ROT_THRESH_DEG,
) -> bool:
    """True once relative motion reaches either threshold."""
    if trans_thresh_m <= 0 or rot_thresh_deg <= 0:
        raise ValueError("keyframe thresholds must be positive")
    rel = relative(last_keyframe, current)
    if float(np.linalg.norm(rel.t)) >= trans_thresh_m:
        return True
    return math.degrees(rotation_angle_rad(rel.q)) >= rot_thresh_deg


def _match_arrays(matches):
    n = len(matches)
    positions = np.zeros((n, 3))
    pixels = np.zeros((n, 2))
    cam_idx = np.zeros(n, dtype=np.int64)
    weights = np.zeros(n)
    for i, (pos, pix, camera_id, w) in enumerate(matches):
        positions[i] = np.asarray(pos, dtype=np.float64)
        pixels[i] = np.asarray(pix, dtype=np.float64)
        cam_idx[i] = CAMERA_IDS.index(camera_id)
        weights[i] = float(w)
    return positions, pixels, cam_idx, weights


def estimate_pose(
    matches,
    rig: CameraRig,
    seed_pose: Pose,
    seed: int = 0,
    rounds: int = RANSAC_ROUNDS,
    inlier_threshold_px: float = INLIER_THRESHOLD_PX,
    min_inlier_ratio: float = MIN_INLIER_RATIO,
) -> tuple[Pose, np.ndarray]:
    """Robust single-frame pose from 2D-3D matches.

    ``matches`` is a sequence of (landmark position, pixel, camera_id, weight).
    Zero-weight matches never participate and come back False in the mask.
    RANSAC samples 4 weighted matches per round, refines from ``seed_pose``
    with Levenberg-Marquardt, scores inliers at ``inlier_threshold_px``, then
    refines once more on the best consensus set.  Deterministic given ``seed``.

    Raises ValueError with fewer than 4 weighted matches and
    PoseEstimationError when the best inlier ratio stays below
    ``min_inlier_ratio``.
    """
    positions, pixels, cam_idx, weights = _match_arrays(matches)
    usable = np.flatnonzero(weights > 0.0)
    if usable.size < RANSAC_SAMPLE:
        raise ValueError(
            f"pose estimation needs at least {RANSAC_SAMPLE} weighted matches, "
            f"got {usable.size}"
        )
    u_pos, u_pix = positions[usable], pixels[usable]
    u_cam, u_w = cam_idx[usable], weights[usable]

    def inliers_at(pose: Pose) -> np.ndarray:
        res, valid, _ = pose_residuals(u_pos, u_pix, u_cam, rig, pose)
        return valid & (np.linalg.norm(res, axis=1) <= inlier_threshold_px)

    # Hypothesis 0: refine on every weighted match from the seed.  With full
    # consensus this already equals RANSAC followed by refinement on all
    # inliers, so the sampling loop is skipped entirely.
    best_count = -1
    best_pose = None
    best_mask = None
    try:
        cand, _ = refine_pose(u_pos, u_pix, u_cam, u_w, rig, seed_pose)
        m = inliers_at(cand)
        best_count, best_pose, best_mask = int(np.count_nonzero(m)), cand, m
    except RankDeficiencyError:
        pass

    if best_count < usable.size:
        rng = np.random.default_rng(seed)
        for _ in range(rounds):
            sample = rng.choice(usable.size, size=RANSAC_SAMPLE, replace=False)
            try:
                cand, _ = refine_pose(
                    u_pos[sample], u_pix[sample], u_cam[sample], u_w[sample],
                    rig, seed_pose, max_iterations=12,
                )
            except RankDeficiencyError:
                continue
            m = inliers_at(cand)
            count = int(np.count_nonzero(m))
            if count > best_count:
                best_count, best_pose, best_mask = count, cand, m
                if count == usable.size:
                    break

    if best_pose is None or best_count < min_inlier_ratio * usable.size:
        ratio = max(best_count, 0) / usable.size
        raise PoseEstimationError(
            f"best inlier ratio {ratio:.2f} below {min_inlier_ratio} "
            f"after {rounds} RANSAC rounds"
        )

    sel = np.flatnonzero(best_mask)
    pose, _ = refine_pose(
        u_pos[sel], u_pix[sel], u_cam[sel], u_w[sel], rig, best_pose
    )
    final = inliers_at(pose)
    mask = np.zeros(len(matches), dtype=bool)
    mask[usable[final]] = True
    return pose, mask


def track_frame(state: TrainingState, obs, rig: CameraRig) -> Pose:
    """Localize one frame against the current map.

    Matches each camera's descriptors to map landmarks predicted visible from
    the constant-velocity pose, estimates the pose robustly, and records the
    match bookkeeping the keyframe step consumes.  Raises TrackingLostError
    (carrying the frame index) when matching or estimation cannot produce at
    least MIN_TRACK_INLIERS weighted inliers.
    """
    if len(state.landmarks) < MIN_MAP_LANDMARKS:
        raise ValueError(
            f"tracking needs a map of at least {MIN_MAP_LANDMARKS} landmarks, "
            f"got {len(state.landmarks)}"
        )
    pred = None
    if state.odometry_prior is not None:
        pred = state.odometry_prior(obs.frame_index)
    if pred is None:
        pred = state.predicted_pose()

    positions = np.stack([lm.position for lm in state.landmarks])
    world_inv = inverse(pred)
    match_rows = []  # (camera_id, CameraObservation, landmark_id, weight)
    matched_queries: dict[str, set] = {}
    for camera_id in CAMERA_IDS:
        frame_obs = obs.cameras.get(camera_id, [])
        if not frame_obs:
            continue
        cam = rig.camera(camera_id)
        t = compose(cam.cam_from_vehicle, world_inv)
        p_cam = t.transform(positions)
        theta = np.arctan2(np.hypot(p_cam[:, 0], p_cam[:, 1]), p_cam[:, 2])
        visible = np.flatnonzero(
            (theta <= cam.intrinsics.theta_max + TRACK_FOV_MARGIN_RAD)
            & (np.linalg.norm(p_cam, axis=1) <= TRACK_MAX_RANGE_M)
        )
        if visible.size == 0:
            continue
        candidates = [
            (int(i), state.landmarks[i].descriptor, state.landmarks[i].semantic_class)
            for i in visible
        ]
        found = features.match([o.descriptor for o in frame_obs], candidates)
        taken = matched_queries.setdefault(camera_id, set())
        for m in found:
            match_rows.append(
                (camera_id, frame_obs[m.query_index], m.landmark_id, m.weight)
            )
            taken.add(m.query_index)

    est_input = [
        (state.landmarks[lm_id].position, q.pixel, camera_id, w)
        for camera_id, q, lm_id, w in match_rows
    ]
    try:
        pose, mask = estimate_pose(est_input, rig, pred, seed=obs.frame_index)
    except (ValueError, PoseEstimationError) as exc:
        raise TrackingLostError(
            f"frame {obs.frame_index}: {exc}", frame_index=obs.frame_index
        ) from exc

    n_inliers = int(np.count_nonzero(mask))
    if n_inliers < MIN_TRACK_INLIERS:
        raise TrackingLostError(
            f"frame {obs.frame_index}: {n_inliers} weighted inlier matches, "
            f"need {MIN_TRACK_INLIERS}",
            frame_index=obs.frame_index,
        )

    rows = np.flatnonzero(mask)
    res, _, _ = pose_residuals(
        np.stack([est_input[i][0] for i in rows]),
        np.stack([est_input[i][1] for i in rows]),
        np.array([CAMERA_IDS.index(est_input[i][2]) for i in rows]),
        rig,
        pose,
    )
    rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))

    state.prev_pose = state.last_pose
    state.last_pose = pose
    state.last_track = _TrackResult(
        pose, match_rows, mask, matched_queries, n_inliers, rmse
    )
    return pose


def _cam_from_world(rig: CameraRig, camera_id: str, vehicle_pose: Pose) -> Pose:
    return compose(rig.camera(camera_id).cam_from_vehicle, inverse(vehicle_pose))


def _reprojects_cleanly(rig, leftover, kf_pose, point) -> bool:
    intr = rig.camera(leftover.camera_id).intrinsics
    t = _cam_from_world(rig, leftover.camera_id, kf_pose)
    p_cam = t.transform(point.reshape(1, 3))
    pix, theta = equidistant_pixels(intr, p_cam)
    if theta[0] > intr.theta_max:
        return False
    return float(np.linalg.norm(pix[0] - leftover.pixel)) <= NEW_LANDMARK_MAX_REPROJ_PX


def _try_create_landmark(state: TrainingState, rig, lo_a: _Leftover, lo_b: _Leftover):
    """Triangulate a pair of leftovers into a new landmark, or None if the
    pair is geometrically implausible."""
    if lo_a.semantic_class != lo_b.semantic_class:
        return None
    pose_a = state.keyframes[lo_a.kf_index].pose
    pose_b = state.keyframes[lo_b.kf_index].pose
    try:
        rays = []
        for lo, kf_pose in ((lo_a, pose_a), (lo_b, pose_b)):
            t = _cam_from_world(rig, lo.camera_id, kf_pose)
            rays.append((t, unproject(rig.camera(lo.camera_id).intrinsics, lo.pixel)))
        point = triangulate(rays)
    except (OutOfModelError, DegenerateBaselineError):
        return None
    for lo, kf_pose in ((lo_a, pose_a), (lo_b, pose_b)):
        if float(np.linalg.norm(point - kf_pose.t)) > NEW_LANDMARK_MAX_RANGE_M:
            return None
        if not _reprojects_cleanly(rig, lo, kf_pose, point):
            return None
    lm = MapLandmark(
        len(state.landmarks), point, lo_a.descriptor, lo_a.semantic_class, 0
    )
    state.landmarks.append(lm)
    for lo in (lo_a, lo_b):
        _attach(state, lo, lm)
    return lm


def _attach(state: TrainingState, lo: _Leftover, lm: MapLandmark) -> None:
    state.keyframes[lo.kf_index].observations.append(
        _Obs(
            lo.camera_id,
            lo.pixel,
            lm.landmark_id,
            features.semantic_weight(lo.semantic_class),
            lo.descriptor,
        )
    )
    lm.observation_count += 1


def _spawn_landmarks(state: TrainingState, rig, current, previous):
    """Triangulate new landmarks from unexplained observations.

    Three passes: cross-camera pairs within the current keyframe (inter-camera
    baseline), current against the previous keyframe's leftovers (temporal
    baseline), then absorption of stragglers into landmarks just created.
    Returns (created landmarks, still-unclaimed current leftovers).
    """
    used = np.zeros(len(current), dtype=bool)
    created: list[MapLandmark] = []
    by_cam = {camera_id: [] for camera_id in CAMERA_IDS}
    for i, lo in enumerate(current):
        by_cam[lo.camera_id].append(i)

    for cam_a, cam_b in combinations(CAMERA_IDS, 2):
        rows_a = [i for i in by_cam[cam_a] if not used[i]]
        rows_b = [i for i in by_cam[cam_b] if not used[i]]
        if not rows_a or not rows_b:
            continue
        candidates = [
            (k, current[k].descriptor, current[k].semantic_class) for k in rows_b
        ]
        for m in features.match([current[i].descriptor for i in rows_a], candidates):
            a, b = rows_a[m.query_index], m.landmark_id
            lm = _try_create_landmark(state, rig, current[a], current[b])
            if lm is not None:
                created.append(lm)
                used[a] = used[b] = True

    if previous:
        rows = [i for i in range(len(current)) if not used[i]]
        if rows:
            candidates = [
                (k, lo.descriptor, lo.semantic_class) for k, lo in enumerate(previous)
            ]
            for m in features.match(
                [current[i].descriptor for i in rows], candidates
            ):
                a = rows[m.query_index]
                lm = _try_create_landmark(state, rig, current[a], previous[m.landmark_id])
                if lm is not None:
                    created.append(lm)
                    used[a] = True

    if created:
        rows = [i for i in range(len(current)) if not used[i]]
        if rows:
            candidates = [
                (lm.landmark_id, lm.descriptor, lm.semantic_class) for lm in created
            ]
            for m in features.match(
                [current[i].descriptor for i in rows], candidates
            ):
                lo = current[rows[m.query_index]]
                lm = state.landmarks[m.landmark_id]
                if lo.semantic_class != lm.semantic_class:
                    continue
                kf_pose = state.keyframes[lo.kf_index].pose
                if _reprojects_cleanly(rig, lo, kf_pose, lm.position):
                    _attach(state, lo, lm)
                    used[rows[m.query_index]] = True

    leftovers = [current[i] for i in range(len(current)) if not used[i]]
    return created, leftovers


def _add_keyframe(state: TrainingState, obs, pose: Pose) -> Keyframe:
    kf = Keyframe(len(state.keyframes), obs.frame_index, pose, [])
    state.keyframes.append(kf)
    tr = state.last_track
    matched: dict[str, set] = {camera_id: set() for camera_id in CAMERA_IDS}
    if tr is not None:
        for row, (camera_id, q, lm_id, weight) in enumerate(tr.match_rows):
            if tr.inlier_mask[row]:
                kf.observations.append(
                    _Obs(camera_id, q.pixel, lm_id, weight, q.descriptor)
                )
                state.landmarks[lm_id].observation_count += 1
        for camera_id, taken in tr.matched_queries.items():
            matched[camera_id] |= taken

    current = [
        _Leftover(kf.keyframe_id, camera_id, q.pixel, q.descriptor, q.semantic_class)
        for camera_id in CAMERA_IDS
        for qi, q in enumerate(obs.cameras.get(camera_id, []))
        if qi not in matched[camera_id]
    ]
    _, state.leftovers = _spawn_landmarks(state, state.rig, current, state.leftovers)
    return kf


def windowed_ba(state: TrainingState, config: BAConfig | None = None) -> TrainingState:
    """Bundle adjustment over the trailing window of keyframes.

    Keyframes before the window are fixed; when the window covers the whole
    trajectory the first keyframe is fixed instead, which makes the call
    identical to a global adjustment.  Only landmarks observed by window
    keyframes are variable.
    """
    config = config or state.config
    if len(state.keyframes) < 2:
        raise ValueError("windowed BA needs at least 2 keyframes")
    start = max(0, len(state.keyframes) - config.window_n)
    fixed = {kf.keyframe_id for kf in state.keyframes[:start]}
    if not fixed:
        fixed = {state.keyframes[0].keyframe_id}
    variable_lms = {
        obs.landmark_id
        for kf in state.keyframes[start:]
        for obs in kf.observations
    }
    bundle_adjust(
        state.keyframes,
        state.landmarks,
        state.rig,
        config,
        fixed,
        variable_landmark_ids=variable_lms,
    )
    return state


def _prune(state: TrainingState, rig) -> None:
    """Drop landmarks that stayed weak through global BA and re-index."""
    n = len(state.landmarks)
    total = np.zeros(n, dtype=np.int64)
    err_sum = np.zeros(n)
    err_cnt = np.zeros(n, dtype=np.int64)
    res, _ = reprojection_residuals(state.keyframes, state.landmarks, rig)
    norms = np.linalg.norm(res, axis=1)
    i = 0
    for kf in state.keyframes:
        for obs in kf.observations:
            total[obs.landmark_id] += 1
            if obs.weight > 0:
                err_sum[obs.landmark_id] += norms[i]
                err_cnt[obs.landmark_id] += 1
            i += 1

    keep: list[MapLandmark] = []
    for lm in state.landmarks:
        if total[lm.landmark_id] < PRUNE_MIN_OBS:
            continue
        if (
            err_cnt[lm.landmark_id]
            and err_sum[lm.landmark_id] / err_cnt[lm.landmark_id] > PRUNE_MAX_REPROJ_PX
        ):
            continue
        keep.append(lm)

    remap = {lm.landmark_id: new_id for new_id, lm in enumerate(keep)}
    for lm in keep:
        lm.landmark_id = remap[lm.landmark_id]
        lm.observation_count = 0
    for kf in state.keyframes:
        kept_obs = [o for o in kf.observations if o.landmark_id in remap]
        for o in kept_obs:
            o.landmark_id = remap[o.landmark_id]
            keep[o.landmark_id].observation_count += 1
        kf.observations = kept_obs
    state.landmarks = keep


def _diagnostic_line(kf: Keyframe, inliers: int, rmse: float) -> str:
    pose_vals = " ".join(f"{v:.9g}" for v in (*kf.pose.q, *kf.pose.t))
    return (
        f"kf {kf.keyframe_id} frame {kf.frame_index} pose {pose_vals} "
        f"inliers {inliers} rmse {rmse:.3e}"
    )


def train(
    session,
    rig: CameraRig,
    config: BAConfig | None = None,
    scenario_name: str = "",
    training_seed: int = 0,
    start_pose: Pose | None = None,
    creation_timestamp: float = 0.0,
    trans_thresh_m: float = DEFAULT_TRANS_THRESH_M,
    rot_thresh_deg: float = DEFAULT_ROT_THRESH_DEG,
    on_keyframe=None,
    odometry_prior=None,
) -> TrainedMap:
    """Run the full training pipeline over a session of FrameObservations.

    The first keyframe is pinned at ``start_pose`` (defaulting to the
    session's declared start, the first frame's reported pose) and bootstraps
    the map by cross-camera triangulation; subsequent frames are tracked and
    promoted to keyframes on sufficient motion, with windowed BA every
    ``config.window_n`` keyframes and one global BA at the end.  Landmarks
    with mean reprojection error above 4 px or fewer than 2 observations are
    pruned afterwards.  The global BA report is attached to the returned map
    as ``global_ba_report``.

    ``on_keyframe``, when given, receives one diagnostic text line per
    keyframe; ``odometry_prior``, when given, maps a frame index to a seed
    Pose and replaces the constant-velocity prediction.

    Raises BootstrapError for sessions that cannot seed a map and lets
    TrackingLostError (with frame index) propagate.
    """
    frames = list(session)
    if len(frames) < 2:
        raise BootstrapError(
            "training needs at least 2 frames; a single frame gives no "
            "trajectory to map"
        )
    config = config or BAConfig()
    state = TrainingState(rig, config, odometry_prior=odometry_prior)
    start = start_pose if start_pose is not None else frames[0].ground_truth_pose

    kf0 = Keyframe(0, frames[0].frame_index, start, [])
    state.keyframes.append(kf0)
    seeds = [
        _Leftover(0, camera_id, q.pixel, q.descriptor, q.semantic_class)
        for camera_id in CAMERA_IDS
        for q in frames[0].cameras.get(camera_id, [])
    ]
    _, state.leftovers = _spawn_landmarks(state, rig, seeds, [])
    if len(state.landmarks) < MIN_MAP_LANDMARKS:
        raise BootstrapError(
            f"bootstrap triangulated {len(state.landmarks)} landmarks from the "
            f"first frame's cross-camera views; need {MIN_MAP_LANDMARKS}"
        )
    state.last_pose = start
    if on_keyframe is not None:
        on_keyframe(_diagnostic_line(kf0, len(kf0.observations), 0.0))

    for frame in frames[1:]:
        pose = track_frame(state, frame, rig)
        if not is_keyframe(pose, state.keyframes[-1].pose, trans_thresh_m, rot_thresh_deg):
            continue
        kf = _add_keyframe(state, frame, pose)
        if (
            len(state.keyframes) >= config.window_n
            and len(state.keyframes) % config.window_n == 0
        ):
            windowed_ba(state, config)
            state.last_pose = state.keyframes[-1].pose
        if on_keyframe is not None:
            on_keyframe(
                _diagnostic_line(kf, state.last_track.n_inliers, state.last_track.rmse_px)
            )

    _, _, report = bundle_adjust(
        state.keyframes,
        state.landmarks,
        rig,
        config,
        fixed={state.keyframes[0].keyframe_id},
    )
    _prune(state, rig)

    for kf in state.keyframes:
        kf.observations = [
            MapObservation(o.camera_id, o.pixel, o.landmark_id, o.weight, o.descriptor)
            for o in kf.observations
        ]
    trained = TrainedMap(
        rig,
        state.keyframes,
        state.landmarks,
        MapMetadata(scenario_name, creation_timestamp, training_seed, start, True),
    )
    trained.global_ba_report = report
    return trained


def point_cloud_text(map_or_landmarks) -> str:
    """Landmark positions as `x y z class` lines for external plotting."""
    landmarks = getattr(map_or_landmarks, "landmarks", map_or_landmarks)
    lines = []
    for lm in landmarks:
        x, y, z = (repr(float(v)) for v in lm.position)
        lines.append(f"{x} {y} {z} {features.class_code(lm.semantic_class)}")
    return "\n".join(lines) + ("\n" if lines else "")
