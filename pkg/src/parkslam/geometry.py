"""Rigid-body poses, the fisheye camera model, and two-view triangulation.

Coordinate conventions, stated once and obeyed everywhere:

* world frame: z-up, meters
* vehicle frame: x-forward, y-left, z-up
* camera frame: z along the optical axis, x right, y down

A :class:`Pose` is a rigid transform mapping points from a source frame to a
target frame (``p_target = R p_source + t``).  Trajectory and keyframe poses
are stored as vehicle-to-world transforms, so their translation is the vehicle
position; projection consumes camera-from-world transforms.  Names at call
sites (``world_from_vehicle``, ``cam_from_world``) keep the direction explicit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBaselineError, DegenerateInputError, OutOfModelError

CAMERA_IDS = ("front", "rear", "left", "right")

# Rays closer to parallel than this cannot be intersected reliably.
TRIANGULATION_MIN_ANGLE_RAD = math.radians(0.5)

_QUAT_NORM_TOL = 1e-12


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) ``v`` (shape (..., 3)) by unit quaternion ``q``."""
    v = np.asarray(v, dtype=np.float64)
    qx, qy, qz = q[1], q[2], q[3]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    # t = 2 (q_vec x v), result = v + w t + q_vec x t; unrolled since
    # np.cross dominates profiles on the small arrays used here
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    out = np.empty_like(v)
    out[..., 0] = vx + q[0] * tx + qy * tz - qz * ty
    out[..., 1] = vy + q[0] * ty + qz * tx - qx * tz
    out[..., 2] = vz + q[0] * tz + qx * ty - qy * tx
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < _QUAT_NORM_TOL:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    return np.concatenate(([math.cos(half)], math.sin(half) / n * axis))


def quat_from_yaw(yaw_rad: float) -> np.ndarray:
    return np.array([math.cos(0.5 * yaw_rad), 0.0, 0.0, math.sin(0.5 * yaw_rad)])


def rotation_angle_rad(q: np.ndarray) -> float:
    """Geodesic rotation angle of a unit quaternion, in [0, pi].

    atan2 form: stays accurate near the identity where acos(w) loses digits.
    """
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def axis_angle_to_quat(rvec: np.ndarray) -> np.ndarray:
    """Rotation-vector (axis * angle) to quaternion; safe at zero."""
    rvec = np.asarray(rvec, dtype=np.float64)
    angle = float(np.linalg.norm(rvec))
    if angle < 1e-18:
        return np.array([1.0, *(0.5 * rvec)])
    return np.concatenate(([math.cos(0.5 * angle)], math.sin(0.5 * angle) / angle * rvec))


@dataclass(eq=False)
class Pose:
    """Rigid transform: ``transform(p) = R(q) p + t``.

    ``q`` is a unit quaternion (w, x, y, z); ``t`` is in meters.  The
    quaternion is renormalized on construction whenever its norm has drifted
    (more than 1e-12 off unit), which keeps already-normalized values
    bit-stable through serialization round-trips.
    """

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4).copy()
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3).copy()
        norm_sq = float(self.q @ self.q)
        if norm_sq < _QUAT_NORM_TOL:
            raise ValueError("quaternion norm too small to normalize")
        if abs(norm_sq - 1.0) > _QUAT_NORM_TOL:
            self.q /= math.sqrt(norm_sq)
        self.q.setflags(write=False)
        self.t.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_yaw_position(cls, yaw_rad: float, position: np.ndarray) -> "Pose":
        return cls(quat_from_yaw(yaw_rad), np.asarray(position, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, points) + self.t


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying ``b`` first, then ``a``."""
    return Pose(quat_multiply(a.q, b.q), quat_rotate(a.q, b.t) + a.t)


def inverse(p: Pose) -> Pose:
    qc = quat_conjugate(p.q)
    return Pose(qc, -quat_rotate(qc, p.t))


def relative(a: Pose, b: Pose) -> Pose:
    """The motion taking ``a`` to ``b``: ``b = a . relative(a, b)``."""
    return compose(inverse(a), b)


@dataclass(eq=False)
class FisheyeIntrinsics:
    """Equidistant fisheye model: image radius r = focal * theta."""

    focal: float
    principal_point: np.ndarray
    image_size: np.ndarray
    theta_max: float

    def __post_init__(self):
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.image_size = np.asarray(self.image_size, dtype=np.float64).reshape(2)
        self.focal = float(self.focal)
        self.theta_max = float(self.theta_max)
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not 0.0 < self.theta_max <= math.pi:
            raise ValueError("theta_max must lie in (0, pi]")
        if np.any(self.image_size <= 0):
            raise ValueError("image_size must be positive")
        if np.any(self.principal_point < 0) or np.any(self.principal_point >= self.image_size):
            raise ValueError("principal_point must lie inside image_size")


def equidistant_pixels(
    intr: FisheyeIntrinsics, points_cam: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Raw equidistant mapping of camera-frame points, no culling.

    Returns (pixels (N, 2), theta (N,)).  Defined for any theta in [0, pi);
    callers apply their own field-of-view and bounds policy.  Points on the
    optical axis map to the principal point.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    rho = np.hypot(points_cam[:, 0], points_cam[:, 1])
    theta = np.arctan2(rho, points_cam[:, 2])
    r = intr.focal * theta
    safe_rho = np.where(rho > 0, rho, 1.0)
    scale = np.where(rho > 0, r / safe_rho, 0.0)
    pixels = intr.principal_point + points_cam[:, :2] * scale[:, None]
    return pixels, theta


def pixel_in_bounds(intr: FisheyeIntrinsics, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return np.all((pixels >= 0.0) & (pixels < intr.image_size), axis=1)


def project(
    intr: FisheyeIntrinsics, cam_from_world: Pose, point: np.ndarray
) -> np.ndarray | None:
    """Project a world point; None when outside the FOV or image bounds.

    Raises DegenerateInputError for a point at the camera center.
    """
    p = cam_from_world.transform(np.asarray(point, dtype=np.float64))
    if float(p @ p) < 1e-24:
        raise DegenerateInputError("point coincides with the camera center")
    pixels, theta = equidistant_pixels(intr, p[None, :])
    if theta[0] > intr.theta_max:
        return None
    if not pixel_in_bounds(intr, pixels)[0]:
        return None
    return pixels[0]


def unproject(intr: FisheyeIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Pixel to unit ray in the camera frame (inverse of the equidistant map)."""
    pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
    d = pixel - intr.principal_point
    r = float(np.hypot(d[0], d[1]))
    theta = r / intr.focal
    if theta > intr.theta_max + 1e-12:
        raise OutOfModelError(
            f"pixel radius {r:.3f} px implies theta {math.degrees(theta):.2f} deg "
            f"beyond theta_max {math.degrees(intr.theta_max):.2f} deg"
        )
    if r < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    s = math.sin(theta) / r
    return np.array([d[0] * s, d[1] * s, math.cos(theta)])


def triangulate(observations) -> np.ndarray:
    """Least-squares intersection of camera rays.

    ``observations`` is a sequence of (cam_from_world: Pose, ray: unit 3-vector
    in that camera's frame).  Minimizes the sum of squared distances from the
    returned world point to each ray.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least 2 observations")
    centers = []
    directions = []
    for cam_from_world, ray in observations:
        world_from_cam = inverse(cam_from_world)
        d = quat_rotate(world_from_cam.q, np.asarray(ray, dtype=np.float64))
        n = float(np.linalg.norm(d))
        if n < 1e-12:
            raise ValueError("ray direction must be nonzero")
        directions.append(d / n)
        centers.append(world_from_cam.t)

    max_angle = 0.0
    for i in range(len(directions)):
        for j in range(i + 1, len(directions)):
            c = min(1.0, abs(float(directions[i] @ directions[j])))
            max_angle = max(max_angle, math.acos(c))
    if max_angle < TRIANGULATION_MIN_ANGLE_RAD:
        raise DegenerateBaselineError(
            f"rays within {math.degrees(max_angle):.4f} deg of parallel "
            f"(need > {math.degrees(TRIANGULATION_MIN_ANGLE_RAD):.2f} deg)"
        )

    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(centers, directions):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    return np.linalg.solve(a, b)


@dataclass(eq=False)
class RigCamera:
    camera_id: str
    intrinsics: FisheyeIntrinsics
    cam_from_vehicle: Pose

    def center_in_vehicle(self) -> np.ndarray:
        return inverse(self.cam_from_vehicle).t


@dataclass(eq=False)
class CameraRig:
    """Four fixed fisheye cameras; inter-camera baselines anchor metric scale."""

    cameras: list[RigCamera]

    def __post_init__(self):
        ids = [c.camera_id for c in self.cameras]
        if sorted(ids) != sorted(CAMERA_IDS):
            raise ValueError(f"rig must have exactly one of each camera id {CAMERA_IDS}, got {ids}")
        centers = [c.center_in_vehicle() for c in self.cameras]
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                if float(np.linalg.norm(centers[i] - centers[j])) <= 0.0:
                    raise ValueError(
                        f"cameras {ids[i]} and {ids[j]} coincide; baselines must be positive"
                    )

    def camera(self, camera_id: str) -> RigCamera:
        for c in self.cameras:
            if c.camera_id == camera_id:
                return c
        raise KeyError(camera_id)


def _cam_from_vehicle(position: np.ndarray, view_dir: np.ndarray) -> Pose:
    z_cam = np.asarray(view_dir, dtype=np.float64)
    z_cam = z_cam / np.linalg.norm(z_cam)
    y_cam = np.array([0.0, 0.0, -1.0])
    x_cam = np.cross(y_cam, z_cam)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(z_cam, x_cam)
    r_vehicle_from_cam = np.column_stack([x_cam, y_cam, z_cam])
    r = r_vehicle_from_cam.T
    return Pose(quat_from_matrix(r), -r @ np.asarray(position, dtype=np.float64))


def default_intrinsics(
    focal: float = 300.0,
    image_size=(1280.0, 800.0),
    theta_max_deg: float = 95.0,
) -> FisheyeIntrinsics:
    size = np.asarray(image_size, dtype=np.float64)
    return FisheyeIntrinsics(
        focal=focal,
        principal_point=size / 2.0,
        image_size=size,
        theta_max=math.radians(theta_max_deg),
    )


def default_rig(
    focal: float = 300.0,
    image_size=(1280.0, 800.0),
    theta_max_deg: float = 95.0,
) -> CameraRig:
    """Surround-view rig: ~1 MP 190-degree cameras yawed outward at the four sides."""
    placements = {
        "front": ((3.7, 0.0, 0.6), (1.0, 0.0, 0.0)),
        "rear": ((-1.0, 0.0, 0.9), (-1.0, 0.0, 0.0)),
        "left": ((1.9, 1.0, 1.0), (0.0, 1.0, 0.0)),
        "right": ((1.9, -1.0, 1.0), (0.0, -1.0, 0.0)),
    }
    cameras = []
    for cam_id in CAMERA_IDS:
        position, view = placements[cam_id]
        cameras.append(
            RigCamera(
                camera_id=cam_id,
                intrinsics=default_intrinsics(focal, image_size, theta_max_deg),
                cam_from_vehicle=_cam_from_vehicle(np.array(position), np.array(view)),
            )
        )
    return CameraRig(cameras)
