"""Relocalization metrics and table-style reporting over scene pairs.

A replay frame counts as relocalized when its estimated pose is within
0.05 m and 2 degrees of ground truth (both bounds inclusive); the rate is
reported over all replay frames, so lost frames count against it.
offset_stats measures how far a replay trajectory sits from the trained
one, a property of the scene pair rather than of estimation quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .geometry import Pose, quat_to_matrix

__all__ = [
    "CSV_HEADER",
    "DEFAULT_TOL_ANG_DEG",
    "DEFAULT_TOL_POS_M",
    "EvalReport",
    "SceneInfo",
    "make_report",
    "offset_stats",
    "pose_error",
    "relocalization_rate",
    "reports_csv",
    "reports_table",
]

CSV_HEADER = (
    "scene,training,replay,diff_days,diff_dist_m,"
    "avg_offset_pos_m,avg_offset_ang_deg,reloc_rate_pct"
)

DEFAULT_TOL_POS_M = 0.05
DEFAULT_TOL_ANG_DEG = 2.0


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(position error in meters, rotation error in degrees).

    Position error is the Euclidean distance between translations; rotation
    error is the geodesic angle of the relative rotation,
    arccos((trace(R_rel) - 1) / 2).  Both components are symmetric in the
    arguments.
    """
    pos = float(np.linalg.norm(estimate.t - truth.t))
    r_rel = quat_to_matrix(estimate.q).T @ quat_to_matrix(truth.q)
    half = (float(np.trace(r_rel)) - 1.0) / 2.0
    ang = math.degrees(math.acos(min(1.0, max(-1.0, half))))
    return pos, ang


def relocalization_rate(
    results,
    truth: list[Pose],
    tol_pos_m: float = DEFAULT_TOL_POS_M,
    tol_ang_deg: float = DEFAULT_TOL_ANG_DEG,
) -> float:
    """Percentage of replay frames localized within tolerance, to two decimals.

    A frame counts when its status is localized and its pose error is within
    (tol_pos_m, tol_ang_deg), both inclusive.  The denominator is every replay
    frame.  Raises ValueError on empty input and AlignmentError when results
    and ground truth differ in length.
    """
    if len(results) == 0 or len(truth) == 0:
        raise ValueError("relocalization_rate needs at least one frame")
    if len(results) != len(truth):
        raise AlignmentError(
            f"{len(results)} replay results vs {len(truth)} ground-truth poses"
        )
    good = 0
    for result, gt in zip(results, truth):
        if not result.localized():
            continue
        pos, ang = pose_error(result.estimated_pose, gt)
        if pos <= tol_pos_m and ang <= tol_ang_deg:
            good += 1
    return round(100.0 * good / len(results), 2)


def offset_stats(
    replay_truth: list[Pose], training_keyframe_poses: list[Pose]
) -> tuple[float, float]:
    """Average distance and angle from each replay pose to its nearest (by
    position) training keyframe pose."""
    if len(replay_truth) == 0 or len(training_keyframe_poses) == 0:
        raise ValueError("offset_stats needs non-empty pose lists")
    train_t = np.stack([p.t for p in training_keyframe_poses])
    pos_sum = 0.0
    ang_sum = 0.0
    for pose in replay_truth:
        nearest = int(np.argmin(np.linalg.norm(train_t - pose.t, axis=1)))
        pos, ang = pose_error(pose, training_keyframe_poses[nearest])
        pos_sum += pos
        ang_sum += ang
    n = len(replay_truth)
    return pos_sum / n, ang_sum / n


def _check_label(label: str) -> str:
    if "," in label or "\n" in label:
        raise ValueError(f"label {label!r} must not contain commas or newlines")
    return label


@dataclass(frozen=True)
class SceneInfo:
    """Labels for one scene pair: a trained session replayed later."""

    scene: str
    training_id: str
    replay_id: str
    time_difference_days: float = 0.0

    def __post_init__(self):
        for label in (self.scene, self.training_id, self.replay_id):
            _check_label(label)
        if self.time_difference_days < 0:
            raise ValueError("time_difference_days must be >= 0")


@dataclass(frozen=True)
class EvalReport:
    """One table row: scene labels, session differences, trajectory offsets,
    and the relocalization rate."""

    scene: str
    training_id: str
    replay_id: str
    time_difference_days: float
    start_distance_m: float
    avg_position_offset_m: float
    avg_angle_offset_deg: float
    relocalization_rate_percent: float

    def __post_init__(self):
        for label in (self.scene, self.training_id, self.replay_id):
            _check_label(label)
        if not 0.0 <= self.relocalization_rate_percent <= 100.0:
            raise ValueError("relocalization rate must be within [0, 100]")
        offsets = (
            self.start_distance_m,
            self.avg_position_offset_m,
            self.avg_angle_offset_deg,
        )
        if min(offsets) < 0:
            raise ValueError("distance and angle offsets must be >= 0")

    def csv_row(self) -> str:
        return ",".join(
            [
                self.scene,
                self.training_id,
                self.replay_id,
                f"{self.time_difference_days:g}",
                f"{self.start_distance_m:.3f}",
                f"{self.avg_position_offset_m:.3f}",
                f"{self.avg_angle_offset_deg:.3f}",
                f"{self.relocalization_rate_percent:.2f}",
            ]
        )


def make_report(scene_config: SceneInfo, train_meta, replay_results, truths) -> EvalReport:
    """Summarize one replay against its trained map as a report row.

    train_meta is the trained map; its metadata start pose and keyframe poses
    fill the start-distance and trajectory-offset columns, replay_results and
    the ground-truth poses fill the rate.
    """
    if not truths:
        raise ValueError("make_report needs ground-truth poses")
    start_dist, _ = pose_error(train_meta.metadata.start_pose, truths[0])
    keyframe_poses = [kf.pose for kf in train_meta.keyframes]
    avg_pos, avg_ang = offset_stats(truths, keyframe_poses)
    rate = relocalization_rate(replay_results, truths)
    return EvalReport(
        scene=scene_config.scene,
        training_id=scene_config.training_id,
        replay_id=scene_config.replay_id,
        time_difference_days=scene_config.time_difference_days,
        start_distance_m=start_dist,
        avg_position_offset_m=avg_pos,
        avg_angle_offset_deg=avg_ang,
        relocalization_rate_percent=rate,
    )


def reports_csv(reports) -> str:
    """CSV text with a fixed header and one row per report; identical inputs
    produce identical bytes."""
    lines = [CSV_HEADER]
    lines.extend(r.csv_row() for r in reports)
    return "\n".join(lines) + "\n"


def reports_table(reports) -> str:
    """The CSV columns as an aligned, human-readable text table."""
    header = CSV_HEADER.split(",")
    rows = [r.csv_row().split(",") for r in reports]
    widths = [
        max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
        for i, h in enumerate(header)
    ]

    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    return "\n".join([fmt(header)] + [fmt(row) for row in rows]) + "\n"
