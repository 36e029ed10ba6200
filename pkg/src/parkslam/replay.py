"""Replay-phase pipeline: coarse GPS initialization against the trained map,
per-frame descriptor matching and pose optimization, and the per-frame
localized/lost decision.

Replay treats the map as strictly immutable: only the current vehicle pose is
ever optimized, never landmark positions or keyframe poses.  The prior for
each frame is a constant-velocity extrapolation of the last localized poses;
after three consecutive lost frames the prior snaps back to the nearest
stored keyframe (re-acquisition).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import features
from .ba import pose_residuals
from .errors import InitializationError, PoseEstimationError
from .geometry import CAMERA_IDS, Pose, compose, inverse, relative
from .map_store import TrainedMap, nearest_keyframes
from .training import estimate_pose

STATUS_LOCALIZED = "localized"
STATUS_LOST = "lost"
STATUS_FEW = "insufficient_matches"
_STATUS_TAGS = {
    STATUS_LOCALIZED: "LOC",
    STATUS_LOST: "LOST",
    STATUS_FEW: "FEW",
}
_TAG_STATUS = {tag: status for status, tag in _STATUS_TAGS.items()}

MATCH_RANGE_M = 25.0  # landmarks beyond feature range never match
REACQUIRE_AFTER = 3


@dataclass(eq=False)
class ReplayConfig:
    min_inliers: int = 12
    search_radius_m: float = 5.0
    candidate_k: int = 3
    max_dist: int = features.DEFAULT_MAX_DIST
    ratio: float = features.DEFAULT_RATIO
    huber_delta_px: float = 2.0

    def __post_init__(self):
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")
        if self.search_radius_m <= 0:
            raise ValueError("search_radius_m must be positive")
        if self.candidate_k < 1:
            raise ValueError("candidate_k must be at least 1")
        if self.huber_delta_px <= 0:
            raise ValueError("huber_delta_px must be positive")


@dataclass(eq=False)
class RelocResult:
    frame_index: int
    status: str
    estimated_pose: Pose | None
    inlier_count: int
    mean_reproj_error_px: float

    def localized(self) -> bool:
        return self.status == STATUS_LOCALIZED


def coarse_init(
    trained_map: TrainedMap, gps_pose: Pose, config: ReplayConfig | None = None
) -> list[int]:
    """Candidate keyframe ids near the GPS fix, nearest first.

    The first candidate's stored pose seeds the first pose optimization.
    Raises InitializationError when no keyframe lies within the search
    radius (wrong map, or the fix is far off the trained trajectory).
    """
    config = config or ReplayConfig()
    candidates = nearest_keyframes(
        trained_map, gps_pose, config.search_radius_m, config.candidate_k
    )
    if not candidates:
        raise InitializationError(
            f"no keyframe within {config.search_radius_m} m of the GPS fix; "
            "the map does not cover this location"
        )
    return candidates


def _visible_matches(trained_map, obs, prior, config):
    """Match frame descriptors to map landmarks visible from the prior."""
    positions = np.stack([lm.position for lm in trained_map.landmarks])
    world_inv = inverse(prior)
    rows = []
    for camera_id in CAMERA_IDS:
        frame_obs = obs.cameras.get(camera_id, [])
        if not frame_obs:
            continue
        cam = trained_map.rig.camera(camera_id)
        t = compose(cam.cam_from_vehicle, world_inv)
        p_cam = t.transform(positions)
        theta = np.arctan2(np.hypot(p_cam[:, 0], p_cam[:, 1]), p_cam[:, 2])
        visible = np.flatnonzero(
            (theta <= cam.intrinsics.theta_max)
            & (np.linalg.norm(p_cam, axis=1) <= MATCH_RANGE_M)
        )
        if visible.size == 0:
            continue
        candidates = [
            (int(i), trained_map.landmarks[i].descriptor, trained_map.landmarks[i].semantic_class)
            for i in visible
        ]
        found = features.match(
            [o.descriptor for o in frame_obs],
            candidates,
            max_dist=config.max_dist,
            ratio=config.ratio,
        )
        for m in found:
            rows.append(
                (
                    trained_map.landmarks[m.landmark_id].position,
                    frame_obs[m.query_index].pixel,
                    camera_id,
                    m.weight,
                )
            )
    return rows


def relocalize_frame(
    trained_map: TrainedMap, obs, prior: Pose, config: ReplayConfig | None = None
) -> RelocResult:
    """Localize one replay frame against the map from a pose prior.

    Status is ``localized`` when the robust solve keeps at least
    ``min_inliers`` weighted inliers with mean reprojection error within
    2x huber_delta; ``insufficient_matches`` when fewer than 4 weighted
    matches exist; ``lost`` otherwise.  The estimated pose is only reported
    for localized frames.
    """
    config = config or ReplayConfig()
    rows = _visible_matches(trained_map, obs, prior, config)
    usable = sum(1 for r in rows if r[3] > 0)
    if usable < 4:
        return RelocResult(obs.frame_index, STATUS_FEW, None, 0, math.nan)
    try:
        pose, mask = estimate_pose(
            rows,
            trained_map.rig,
            prior,
            seed=obs.frame_index,
            inlier_threshold_px=config.huber_delta_px,
        )
    except PoseEstimationError:
        return RelocResult(obs.frame_index, STATUS_LOST, None, 0, math.nan)

    inliers = np.flatnonzero(mask)
    res, _, _ = pose_residuals(
        np.stack([rows[i][0] for i in inliers]),
        np.stack([rows[i][1] for i in inliers]),
        np.array([CAMERA_IDS.index(rows[i][2]) for i in inliers]),
        trained_map.rig,
        pose,
        config.huber_delta_px,
    )
    mean_err = float(np.mean(np.linalg.norm(res, axis=1)))
    count = int(inliers.size)
    if count >= config.min_inliers and mean_err <= 2.0 * config.huber_delta_px:
        return RelocResult(obs.frame_index, STATUS_LOCALIZED, pose, count, mean_err)
    return RelocResult(obs.frame_index, STATUS_LOST, None, count, mean_err)


def replay(
    trained_map: TrainedMap,
    session,
    gps_pose: Pose,
    config: ReplayConfig | None = None,
) -> list[RelocResult]:
    """Relocalize a whole session against an immutable trained map.

    Coarse GPS initialization picks the starting prior; localized frames
    update a constant-velocity prior; after REACQUIRE_AFTER consecutive lost
    frames the prior resets to the keyframe nearest the last good pose.
    Raises InitializationError when coarse initialization finds nothing.
    """
    config = config or ReplayConfig()
    candidates = coarse_init(trained_map, gps_pose, config)
    prior = trained_map.keyframes[candidates[0]].pose

    results: list[RelocResult] = []
    last_good: Pose | None = None
    velocity: Pose | None = None
    consecutive_lost = 0
    for obs in session:
        result = relocalize_frame(trained_map, obs, prior, config)
        results.append(result)
        if result.localized():
            if last_good is not None:
                velocity = relative(last_good, result.estimated_pose)
            last_good = result.estimated_pose
            consecutive_lost = 0
            prior = (
                compose(last_good, velocity) if velocity is not None else last_good
            )
            continue
        consecutive_lost += 1
        if consecutive_lost >= REACQUIRE_AFTER and last_good is not None:
            near = nearest_keyframes(
                trained_map, last_good, config.search_radius_m, 1
            )
            if near:
                prior = trained_map.keyframes[near[0]].pose
        elif velocity is not None:
            # coast on the last known velocity while briefly lost
            prior = compose(prior, velocity)
    return results


def results_text(results) -> str:
    """Per-frame results as `frame status qw qx qy qz tx ty tz inliers rmse`
    lines; status tags are LOC, LOST, and FEW, poses are nan for non-localized
    frames.  Floats round-trip exactly through parse_results_text."""
    lines = []
    for r in results:
        tag = _STATUS_TAGS[r.status]
        if r.estimated_pose is not None:
            pose_vals = [*r.estimated_pose.q, *r.estimated_pose.t]
        else:
            pose_vals = [math.nan] * 7
        vals = " ".join(repr(float(v)) for v in pose_vals)
        lines.append(
            f"{r.frame_index} {tag} {vals} {r.inlier_count} "
            f"{repr(float(r.mean_reproj_error_px))}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_results_text(text: str) -> list[RelocResult]:
    """Inverse of results_text."""
    results = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 11 or parts[1] not in _TAG_STATUS:
            raise ValueError(f"line {lineno}: malformed replay result {raw!r}")
        status = _TAG_STATUS[parts[1]]
        vals = [float(v) for v in parts[2:9]]
        pose = None
        if status == STATUS_LOCALIZED:
            pose = Pose(np.array(vals[:4]), np.array(vals[4:]))
        results.append(
            RelocResult(int(parts[0]), status, pose, int(parts[9]), float(parts[10]))
        )
    return results
