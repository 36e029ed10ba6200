"""Deterministic synthetic parking scenes: worlds, trajectories, observations.

Everything here is a pure function of its inputs and an integer seed.  To keep
runs with different perturbation magnitudes comparable, every random channel
is always drawn at full size (one value per landmark and camera) regardless of
which landmarks end up visible or which probabilities are zero.  Two renders
with equal seeds then consume identical random streams, so turning one knob
(say, the descriptor flip probability) changes exactly the quantities that
knob controls and nothing else.

Scene files are line-oriented text, one record per line:

* ``W <seed>`` world seed
* ``L <id> <x> <y> <z> <class> <hex-descriptor>`` landmark
* ``P <idx> <qw> <qx> <qy> <qz> <tx> <ty> <tz>`` trajectory pose

Session logs hold per-frame observations:

* ``F <frame_index> <qw> <qx> <qy> <qz> <tx> <ty> <tz>`` frame header with the
  ground-truth vehicle pose (held out from the pipelines; evaluation only)
* ``O <camera_id> <px> <py> <class> <hex-descriptor> <true_landmark_id>``

Floats are written with ``repr`` so text round-trips are lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .features import DESCRIPTOR_BYTES, class_code, semantic_weight
from .geometry import (
    CAMERA_IDS,
    CameraRig,
    Pose,
    compose,
    equidistant_pixels,
    inverse,
    pixel_in_bounds,
    quat_from_yaw,
    quat_multiply,
)

MAX_RANGE_M = 25.0

TRAJECTORY_PRESETS = ("home_park", "reverse_parkout", "office_lot")


@dataclass(eq=False)
class GroundTruthLandmark:
    landmark_id: int
    position: np.ndarray
    descriptor: bytes
    semantic_class: str

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if len(self.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError("descriptor must be 32 bytes")
        class_code(self.semantic_class)

    def is_dynamic(self) -> bool:
        return semantic_weight(self.semantic_class) == 0.0


@dataclass(eq=False)
class World:
    landmarks: list[GroundTruthLandmark]
    seed: int = 0

    def __post_init__(self):
        ids = [lm.landmark_id for lm in self.landmarks]
        if ids != list(range(len(ids))):
            raise ValueError("landmark ids must be dense 0..n-1")

    def positions(self) -> np.ndarray:
        if not self.landmarks:
            return np.zeros((0, 3))
        return np.stack([lm.position for lm in self.landmarks])


@dataclass(eq=False)
class TrajectorySpec:
    preset: str = "home_park"
    length_m: float = 30.0
    frame_spacing_m: float = 0.25
    lateral_offset_m: float = 0.0
    angular_offset_deg: float = 0.0

    def __post_init__(self):
        if self.preset not in TRAJECTORY_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}, expected one of {TRAJECTORY_PRESETS}")
        if self.frame_spacing_m <= 0:
            raise ValueError("frame_spacing_m must be positive")
        if self.length_m < self.frame_spacing_m:
            raise ValueError("length_m must be at least frame_spacing_m")


@dataclass(eq=False)
class PerturbationSpec:
    descriptor_flip_prob: float = 0.0
    landmark_churn_frac: float = 0.0
    dynamic_resample: bool = False
    pixel_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    gps_pos_sigma_m: float = 1.0
    gps_yaw_sigma_deg: float = 5.0

    def __post_init__(self):
        for name in ("descriptor_flip_prob", "landmark_churn_frac", "dropout_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("pixel_noise_sigma", "gps_pos_sigma_m", "gps_yaw_sigma_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(eq=False)
class CameraObservation:
    pixel: np.ndarray
    descriptor: bytes
    semantic_class: str
    true_landmark_id: int

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=np.float64).reshape(2)


@dataclass(eq=False)
class FrameObservations:
    frame_index: int
    ground_truth_pose: Pose
    cameras: dict[str, list[CameraObservation]] = field(default_factory=dict)

    def total_observations(self) -> int:
        return sum(len(obs) for obs in self.cameras.values())


def generate_world(n_landmarks: int, extent, class_mix: dict, seed: int) -> World:
    """Uniform landmarks in a corridor box around the trajectory region.

    The box spans x in [-10, extent_x - 10] (paths head +x from the origin),
    y in [-extent_y/2, extent_y/2], z in [0, extent_z].
    """
    if n_landmarks <= 0:
        raise ConfigError("n_landmarks must be positive")
    if not class_mix:
        raise ConfigError("class_mix must not be empty")
    names = sorted(class_mix)
    probs = np.array([float(class_mix[n]) for n in names])
    for name in names:
        class_code(name)
    if np.any(probs < 0) or probs.sum() <= 0:
        raise ConfigError("class_mix probabilities must be >= 0 and sum > 0")
    probs = probs / probs.sum()

    extent = np.asarray(extent, dtype=np.float64).reshape(3)
    if np.any(extent <= 0):
        raise ConfigError("extent must be positive")
    low = np.array([-10.0, -extent[1] / 2.0, 0.0])
    high = np.array([extent[0] - 10.0, extent[1] / 2.0, extent[2]])

    rng = np.random.default_rng(seed)
    positions = rng.uniform(low, high, size=(n_landmarks, 3))
    classes = rng.choice(len(names), size=n_landmarks, p=probs)
    descriptors = rng.integers(0, 256, size=(n_landmarks, DESCRIPTOR_BYTES), dtype=np.uint8)
    landmarks = [
        GroundTruthLandmark(i, positions[i], descriptors[i].tobytes(), names[classes[i]])
        for i in range(n_landmarks)
    ]
    return World(landmarks=landmarks, seed=int(seed))


# Curvature profiles: list of (fraction of total length, signed total heading
# change in radians over that stretch).  Positive turns left.
_PRESET_PROFILES = {
    "home_park": [(0.6, 0.0), (0.4, math.pi / 2)],
    "reverse_parkout": [(0.4, -math.pi / 2), (0.6, 0.0)],
    "office_lot": [(0.5, math.pi / 4), (0.5, -math.pi / 4)],
}


def generate_trajectory(spec: TrajectorySpec) -> list[Pose]:
    """Poses spaced frame_spacing_m apart along the preset path.

    The path is integrated as straight hops of frame_spacing_m with the
    heading updated from the preset's curvature profile, so consecutive
    positions are exactly frame_spacing_m apart and headings are tangent
    to the polyline.
    """
    if spec.preset == "office_lot" and spec.length_m < 30.0:
        raise ValueError("office_lot is an S-curve of at least 30 m")
    profile = _PRESET_PROFILES[spec.preset]
    length = float(spec.length_m)
    step = float(spec.frame_spacing_m)
    n_poses = int(math.floor(length / step + 1e-9)) + 1

    # curvature kappa(s) = d(heading)/ds, piecewise constant
    boundaries = []
    s0 = 0.0
    for frac, dpsi in profile:
        seg = frac * length
        boundaries.append((s0, s0 + seg, dpsi / seg))
        s0 += seg

    def curvature(s: float) -> float:
        for _, hi, kappa in boundaries:
            if s < hi:
                return kappa
        return boundaries[-1][2]

    heading = math.radians(spec.angular_offset_deg)
    position = np.array([0.0, spec.lateral_offset_m, 0.0])
    poses = [Pose.from_yaw_position(heading, position)]
    for k in range(1, n_poses):
        s = (k - 1) * step
        position = position + step * np.array([math.cos(heading), math.sin(heading), 0.0])
        heading += curvature(s) * step
        poses.append(Pose.from_yaw_position(heading, position))
    return poses


def _flip_descriptors(bits: np.ndarray, uniforms: np.ndarray, prob: float) -> np.ndarray:
    """bits: (n, 256) uint8 in {0,1}; flips where uniforms < prob."""
    return bits ^ (uniforms < prob).astype(np.uint8)


def _world_descriptor_bits(world: World) -> np.ndarray:
    if not world.landmarks:
        return np.zeros((0, 8 * DESCRIPTOR_BYTES), dtype=np.uint8)
    packed = np.frombuffer(
        b"".join(lm.descriptor for lm in world.landmarks), dtype=np.uint8
    ).reshape(len(world.landmarks), DESCRIPTOR_BYTES)
    return np.unpackbits(packed, axis=1)


def render_observations(
    world: World,
    rig: CameraRig,
    pose: Pose,
    pert: PerturbationSpec,
    seed: int,
    frame_index: int = 0,
) -> FrameObservations:
    """Observations of ``world`` from the rig at ``pose`` (world_from_vehicle).

    A landmark is emitted for a camera when it lies within theta_max, within
    MAX_RANGE_M of the camera, and its noisy pixel is inside image bounds.
    The seed stream is keyed by (seed, frame_index), and all random channels
    are drawn for every landmark before any culling.
    """
    rng = np.random.default_rng([int(seed), int(frame_index)])
    n = len(world.landmarks)
    positions = world.positions()
    bits = _world_descriptor_bits(world)
    vehicle_from_world = inverse(pose)

    cameras: dict[str, list[CameraObservation]] = {}
    for cam_id in CAMERA_IDS:
        noise = rng.normal(size=(n, 2))
        drop_u = rng.uniform(size=n)
        flip_u = rng.uniform(size=(n, 8 * DESCRIPTOR_BYTES))
        cam = rig.camera(cam_id)
        obs_list: list[CameraObservation] = []
        cameras[cam_id] = obs_list
        if n == 0:
            continue

        cam_from_world = compose(cam.cam_from_vehicle, vehicle_from_world)
        p_cam = cam_from_world.transform(positions)
        pixels, theta = equidistant_pixels(cam.intrinsics, p_cam)
        pixels = pixels + pert.pixel_noise_sigma * noise
        keep = (
            (theta <= cam.intrinsics.theta_max)
            & (np.linalg.norm(p_cam, axis=1) <= MAX_RANGE_M)
            & pixel_in_bounds(cam.intrinsics, pixels)
            & (drop_u >= pert.dropout_prob)
        )
        if not np.any(keep):
            continue
        idx = np.flatnonzero(keep)
        flipped = _flip_descriptors(bits[idx], flip_u[idx], pert.descriptor_flip_prob)
        packed = np.packbits(flipped, axis=1)
        for row, i in enumerate(idx):
            lm = world.landmarks[i]
            obs_list.append(
                CameraObservation(
                    pixel=pixels[i],
                    descriptor=packed[row].tobytes(),
                    semantic_class=lm.semantic_class,
                    true_landmark_id=lm.landmark_id,
                )
            )
    return FrameObservations(
        frame_index=int(frame_index), ground_truth_pose=pose, cameras=cameras
    )


def render_session(
    world: World,
    rig: CameraRig,
    trajectory: list[Pose],
    pert: PerturbationSpec,
    seed: int,
) -> list[FrameObservations]:
    return [
        render_observations(world, rig, pose, pert, seed, frame_index=k)
        for k, pose in enumerate(trajectory)
    ]


def perturb_session(world: World, pert: PerturbationSpec, seed: int) -> World:
    """Between-session scene change: churn, dynamic relocation, descriptor flips.

    Static landmarks are replaced (new position and descriptor, same class and
    id) with probability landmark_churn_frac; dynamic-class landmarks move to
    fresh positions keeping their descriptors when dynamic_resample is set;
    per-bit descriptor flips then apply session-wide.  Replacement positions
    are drawn from the bounding box of the existing landmark positions.
    """
    rng = np.random.default_rng(seed)
    n = len(world.landmarks)
    if n == 0:
        return World(landmarks=[], seed=world.seed)
    positions = world.positions()
    low, high = positions.min(axis=0), positions.max(axis=0)

    churn_u = rng.uniform(size=n)
    churn_pos = rng.uniform(low, high, size=(n, 3))
    churn_desc = rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)
    dyn_pos = rng.uniform(low, high, size=(n, 3))
    flip_u = rng.uniform(size=(n, 8 * DESCRIPTOR_BYTES))

    landmarks = []
    for i, lm in enumerate(world.landmarks):
        pos = lm.position
        desc = lm.descriptor
        if lm.is_dynamic():
            if pert.dynamic_resample:
                pos = dyn_pos[i]
        elif churn_u[i] < pert.landmark_churn_frac:
            pos = churn_pos[i]
            desc = churn_desc[i].tobytes()
        landmarks.append(GroundTruthLandmark(lm.landmark_id, pos, desc, lm.semantic_class))

    out = World(landmarks=landmarks, seed=world.seed)
    if pert.descriptor_flip_prob > 0.0:
        bits = _flip_descriptors(_world_descriptor_bits(out), flip_u, pert.descriptor_flip_prob)
        packed = np.packbits(bits, axis=1)
        for i, lm in enumerate(out.landmarks):
            lm.descriptor = packed[i].tobytes()
    return out


def simulate_gps(true_pose: Pose, pert: PerturbationSpec, seed: int) -> Pose:
    """Noisy GPS fix: Gaussian xy offset plus Gaussian yaw error."""
    rng = np.random.default_rng(seed)
    dx, dy = rng.normal(scale=pert.gps_pos_sigma_m, size=2)
    dyaw = float(rng.normal(scale=math.radians(pert.gps_yaw_sigma_deg)))
    q = quat_multiply(quat_from_yaw(dyaw), true_pose.q)
    return Pose(q, true_pose.t + np.array([dx, dy, 0.0]))


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_scene(path, world: World | None = None, trajectory: list[Pose] | None = None) -> None:
    if world is None and trajectory is None:
        raise ValueError("scene needs a world, a trajectory, or both")
    lines = []
    if world is not None:
        lines.append(f"W {world.seed}")
        for lm in world.landmarks:
            lines.append(
                f"L {lm.landmark_id} {_format_floats(lm.position)} "
                f"{lm.semantic_class} {lm.descriptor.hex()}"
            )
    if trajectory is not None:
        for k, pose in enumerate(trajectory):
            lines.append(f"P {k} {_format_floats(pose.q)} {_format_floats(pose.t)}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(path) -> tuple[World | None, list[Pose]]:
    seed = 0
    landmarks: list[GroundTruthLandmark] = []
    poses: list[tuple[int, Pose]] = []
    saw_world = False
    with open(path, "r", encoding="ascii") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "W":
                    seed = int(parts[1])
                    saw_world = True
                elif parts[0] == "L":
                    saw_world = True
                    landmarks.append(
                        GroundTruthLandmark(
                            landmark_id=int(parts[1]),
                            position=[float(parts[2]), float(parts[3]), float(parts[4])],
                            semantic_class=parts[5],
                            descriptor=bytes.fromhex(parts[6]),
                        )
                    )
                elif parts[0] == "P":
                    q = [float(x) for x in parts[2:6]]
                    t = [float(x) for x in parts[6:9]]
                    poses.append((int(parts[1]), Pose(q, t)))
                else:
                    raise ValueError(f"unknown record type {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scene record: {exc}") from exc
    poses.sort(key=lambda kv: kv[0])
    world = World(landmarks=landmarks, seed=seed) if saw_world else None
    return world, [p for _, p in poses]


def save_session(path, frames: list[FrameObservations]) -> None:
    lines = []
    for frame in frames:
        gt = frame.ground_truth_pose
        lines.append(f"F {frame.frame_index} {_format_floats(gt.q)} {_format_floats(gt.t)}")
        for cam_id in CAMERA_IDS:
            for obs in frame.cameras.get(cam_id, []):
                lines.append(
                    f"O {cam_id} {_format_floats(obs.pixel)} {obs.semantic_class} "
                    f"{obs.descriptor.hex()} {obs.true_landmark_id}"
                )
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n" if lines else "")


def load_session(path) -> list[FrameObservations]:
    frames: list[FrameObservations] = []
    current: FrameObservations | None = None
    with open(path, "r", encoding="ascii") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "F":
                    q = [float(x) for x in parts[2:6]]
                    t = [float(x) for x in parts[6:9]]
                    current = FrameObservations(
                        frame_index=int(parts[1]),
                        ground_truth_pose=Pose(q, t),
                        cameras={cam_id: [] for cam_id in CAMERA_IDS},
                    )
                    frames.append(current)
                elif parts[0] == "O":
                    if current is None:
                        raise ValueError("observation before any frame header")
                    cam_id = parts[1]
                    if cam_id not in CAMERA_IDS:
                        raise ValueError(f"unknown camera id {cam_id!r}")
                    current.cameras[cam_id].append(
                        CameraObservation(
                            pixel=[float(parts[2]), float(parts[3])],
                            semantic_class=parts[4],
                            descriptor=bytes.fromhex(parts[5]),
                            true_landmark_id=int(parts[6]),
                        )
                    )
                else:
                    raise ValueError(f"unknown record type {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad session record: {exc}") from exc
    return frames
