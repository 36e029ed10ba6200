"""The trained map data model and its bit-exact persistence.

Binary ``.ttpm`` layout, little-endian throughout:

* header (28 bytes): magic ``TTPM``, u32 version = 1, u64 keyframe count,
  u64 landmark count, u32 CRC32 of the payload
* payload:

  - metadata: u16 scenario-name length + UTF-8 name, f64 creation timestamp,
    u64 training seed, start pose (7 x f64: qw qx qy qz tx ty tz),
    u8 global-BA flag
  - rig: per camera in canonical order, u8 camera index, 6 x f64 intrinsics
    (focal, principal point, image size, theta_max), 7 x f64 cam-from-vehicle
  - landmark records (61 bytes each): 3 x f64 position, 32-byte descriptor,
    u8 class code, u32 observation count
  - keyframe records: u64 frame index, 7 x f64 pose, u32 observation count,
    then per observation (49 bytes): u8 camera index, 2 x f32 pixel,
    u32 landmark id, f32 weight, 32-byte descriptor

Fixed-width records keep the closed-form size check and corruption
localization trivial.  Observation pixels and weights are stored as f32, so
the in-memory types quantize to f32 on construction; round-trips are then
bit-exact.  A lossless text dump (``dump_map``/``parse_map``) mirrors every
field for debugging and diffing.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IntegrityError,
    MapCorruptionError,
    NotAMapError,
    UnsupportedVersionError,
)
from .features import DESCRIPTOR_BYTES, class_code, class_name
from .geometry import CAMERA_IDS, CameraRig, FisheyeIntrinsics, Pose, RigCamera

MAGIC = b"TTPM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIQQI")
_POSE = struct.Struct("<7d")
_META_FIXED = struct.Struct("<dQ")
_CAMERA = struct.Struct("<B6d")
_LANDMARK_TAIL = struct.Struct("<BI")
_OBS = struct.Struct("<B2fIf")

LANDMARK_RECORD_BYTES = 3 * 8 + DESCRIPTOR_BYTES + _LANDMARK_TAIL.size  # 61
KEYFRAME_RECORD_BYTES = 8 + _POSE.size + 4  # 68, excluding observations
OBSERVATION_RECORD_BYTES = _OBS.size + DESCRIPTOR_BYTES  # 49
RIG_BLOCK_BYTES = len(CAMERA_IDS) * (_CAMERA.size + _POSE.size)


@dataclass(eq=False)
class MapObservation:
    camera_id: str
    pixel: np.ndarray
    landmark_id: int
    weight: float
    descriptor: bytes

    def __post_init__(self):
        if self.camera_id not in CAMERA_IDS:
            raise ValueError(f"unknown camera id {self.camera_id!r}")
        # f32 on the wire; quantize now so round-trips are exact
        self.pixel = np.asarray(self.pixel, dtype=np.float32).reshape(2)
        self.weight = float(np.float32(self.weight))
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")
        if len(self.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError("descriptor must be 32 bytes")


@dataclass(eq=False)
class Keyframe:
    keyframe_id: int
    frame_index: int
    pose: Pose  # world_from_vehicle
    observations: list[MapObservation] = field(default_factory=list)


@dataclass(eq=False)
class MapLandmark:
    landmark_id: int
    position: np.ndarray
    descriptor: bytes
    semantic_class: str
    observation_count: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if len(self.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError("descriptor must be 32 bytes")
        class_code(self.semantic_class)


@dataclass(eq=False)
class MapMetadata:
    scenario_name: str = ""
    creation_timestamp: float = 0.0
    training_seed: int = 0
    start_pose: Pose = field(default_factory=Pose.identity)
    global_ba_done: bool = False


@dataclass(eq=False)
class TrainedMap:
    rig: CameraRig
    keyframes: list[Keyframe]
    landmarks: list[MapLandmark]
    metadata: MapMetadata
    format_version: int = FORMAT_VERSION


def validate_map(m: TrainedMap) -> None:
    """Raise IntegrityError unless every TrainedMap invariant holds."""
    if not m.landmarks:
        raise IntegrityError("map has no landmarks; refusing to persist an un-trained map")
    if not m.keyframes:
        raise IntegrityError("map has no keyframes")
    if not m.metadata.global_ba_done:
        raise IntegrityError("global bundle adjustment must run before a map is saved")
    if [lm.landmark_id for lm in m.landmarks] != list(range(len(m.landmarks))):
        raise IntegrityError("landmark ids must be dense 0..n-1")
    if [kf.keyframe_id for kf in m.keyframes] != list(range(len(m.keyframes))):
        raise IntegrityError("keyframe ids must be dense 0..k-1")
    frame_indices = [kf.frame_index for kf in m.keyframes]
    if any(b <= a for a, b in zip(frame_indices, frame_indices[1:])):
        raise IntegrityError("keyframes must be ordered by strictly increasing frame_index")
    counts = [0] * len(m.landmarks)
    for kf in m.keyframes:
        for obs in kf.observations:
            if not 0 <= obs.landmark_id < len(m.landmarks):
                raise IntegrityError(
                    f"keyframe {kf.keyframe_id} references unknown landmark {obs.landmark_id}"
                )
            counts[obs.landmark_id] += 1
    for lm in m.landmarks:
        if lm.observation_count != counts[lm.landmark_id]:
            raise IntegrityError(
                f"landmark {lm.landmark_id} observation_count {lm.observation_count} "
                f"!= actual {counts[lm.landmark_id]}"
            )
    if len(m.metadata.scenario_name.encode("utf-8")) > 0xFFFF:
        raise IntegrityError("scenario name too long")


def map_file_size(
    n_keyframes: int, n_landmarks: int, n_observations: int, scenario_name: str = ""
) -> int:
    """Closed-form byte size of the serialized map."""
    meta = 2 + len(scenario_name.encode("utf-8")) + _META_FIXED.size + _POSE.size + 1
    return (
        _HEADER.size
        + meta
        + RIG_BLOCK_BYTES
        + n_landmarks * LANDMARK_RECORD_BYTES
        + n_keyframes * KEYFRAME_RECORD_BYTES
        + n_observations * OBSERVATION_RECORD_BYTES
    )


def _pack_pose(p: Pose) -> bytes:
    return _POSE.pack(*p.q, *p.t)


def serialize_map(m: TrainedMap) -> bytes:
    validate_map(m)
    parts: list[bytes] = []
    name = m.metadata.scenario_name.encode("utf-8")
    parts.append(struct.pack("<H", len(name)))
    parts.append(name)
    parts.append(_META_FIXED.pack(m.metadata.creation_timestamp, m.metadata.training_seed))
    parts.append(_pack_pose(m.metadata.start_pose))
    parts.append(struct.pack("<B", 1 if m.metadata.global_ba_done else 0))
    for idx, cam_id in enumerate(CAMERA_IDS):
        cam = m.rig.camera(cam_id)
        intr = cam.intrinsics
        parts.append(
            _CAMERA.pack(
                idx,
                intr.focal,
                intr.principal_point[0],
                intr.principal_point[1],
                intr.image_size[0],
                intr.image_size[1],
                intr.theta_max,
            )
        )
        parts.append(_pack_pose(cam.cam_from_vehicle))
    for lm in m.landmarks:
        parts.append(struct.pack("<3d", *lm.position))
        parts.append(lm.descriptor)
        parts.append(_LANDMARK_TAIL.pack(class_code(lm.semantic_class), lm.observation_count))
    for kf in m.keyframes:
        parts.append(struct.pack("<Q", kf.frame_index))
        parts.append(_pack_pose(kf.pose))
        parts.append(struct.pack("<I", len(kf.observations)))
        for obs in kf.observations:
            parts.append(
                _OBS.pack(
                    CAMERA_IDS.index(obs.camera_id),
                    float(obs.pixel[0]),
                    float(obs.pixel[1]),
                    obs.landmark_id,
                    obs.weight,
                )
            )
            parts.append(obs.descriptor)
    payload = b"".join(parts)
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, len(m.keyframes), len(m.landmarks), zlib.crc32(payload)
    )
    return header + payload


class _Cursor:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise MapCorruptionError(
                f"map truncated: needed {n} bytes at offset {self.offset}, "
                f"file has {len(self.data)}",
                offset=self.offset,
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def _read_pose(cur: _Cursor) -> Pose:
    vals = cur.unpack(_POSE)
    return Pose(np.array(vals[:4]), np.array(vals[4:]))


def deserialize_map(data: bytes) -> TrainedMap:
    if len(data) < _HEADER.size:
        raise NotAMapError(f"file of {len(data)} bytes is too short to be a map")
    magic, version, n_kf, n_lm, crc = _HEADER.unpack(data[: _HEADER.size])
    if magic != MAGIC:
        raise NotAMapError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"map format version {version} not supported (reader supports {FORMAT_VERSION})"
        )
    payload = data[_HEADER.size :]
    actual_crc = zlib.crc32(payload)
    if actual_crc != crc:
        raise MapCorruptionError(
            f"payload checksum mismatch: header says {crc:#010x}, payload is {actual_crc:#010x}",
            offset=_HEADER.size,
        )
    cur = _Cursor(data, _HEADER.size)

    (name_len,) = cur.unpack(struct.Struct("<H"))
    try:
        name = cur.take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MapCorruptionError(f"scenario name is not UTF-8: {exc}", offset=cur.offset) from exc
    timestamp, seed = cur.unpack(_META_FIXED)
    start_pose = _read_pose(cur)
    (ba_flag,) = cur.unpack(struct.Struct("<B"))
    if ba_flag not in (0, 1):
        raise MapCorruptionError(f"global-BA flag byte is {ba_flag}", offset=cur.offset - 1)
    if ba_flag != 1:
        raise MapCorruptionError("map was written without global bundle adjustment", offset=cur.offset - 1)

    cameras = []
    for idx in range(len(CAMERA_IDS)):
        record_at = cur.offset
        cam_idx, focal, ppx, ppy, w, h, theta_max = cur.unpack(_CAMERA)
        if cam_idx != idx:
            raise MapCorruptionError(
                f"camera record {idx} has index {cam_idx}", offset=record_at
            )
        extrinsic = _read_pose(cur)
        try:
            intr = FisheyeIntrinsics(focal, [ppx, ppy], [w, h], theta_max)
        except ValueError as exc:
            raise MapCorruptionError(f"bad intrinsics: {exc}", offset=record_at) from exc
        cameras.append(RigCamera(CAMERA_IDS[idx], intr, extrinsic))
    try:
        rig = CameraRig(cameras)
    except ValueError as exc:
        raise MapCorruptionError(f"bad rig: {exc}", offset=cur.offset) from exc

    landmarks = []
    for i in range(n_lm):
        record_at = cur.offset
        px, py, pz = cur.unpack(struct.Struct("<3d"))
        desc = cur.take(DESCRIPTOR_BYTES)
        code, obs_count = cur.unpack(_LANDMARK_TAIL)
        try:
            cname = class_name(code)
        except Exception as exc:
            raise MapCorruptionError(
                f"landmark {i} has unknown class code {code}", offset=record_at
            ) from exc
        landmarks.append(MapLandmark(i, [px, py, pz], desc, cname, obs_count))

    keyframes = []
    for k in range(n_kf):
        record_at = cur.offset
        (frame_index,) = cur.unpack(struct.Struct("<Q"))
        pose = _read_pose(cur)
        (n_obs,) = cur.unpack(struct.Struct("<I"))
        observations = []
        for _ in range(n_obs):
            obs_at = cur.offset
            cam_idx, pix_x, pix_y, lm_id, weight = cur.unpack(_OBS)
            desc = cur.take(DESCRIPTOR_BYTES)
            if cam_idx >= len(CAMERA_IDS):
                raise MapCorruptionError(
                    f"observation has camera index {cam_idx}", offset=obs_at
                )
            if lm_id >= n_lm:
                raise MapCorruptionError(
                    f"observation references landmark {lm_id} of {n_lm}", offset=obs_at
                )
            try:
                observations.append(
                    MapObservation(CAMERA_IDS[cam_idx], [pix_x, pix_y], lm_id, weight, desc)
                )
            except ValueError as exc:
                raise MapCorruptionError(f"bad observation: {exc}", offset=obs_at) from exc
        keyframes.append(Keyframe(k, frame_index, pose, observations))

    if cur.offset != len(data):
        raise MapCorruptionError(
            f"{len(data) - cur.offset} trailing bytes after the last record",
            offset=cur.offset,
        )
    m = TrainedMap(
        rig=rig,
        keyframes=keyframes,
        landmarks=landmarks,
        metadata=MapMetadata(name, timestamp, seed, start_pose, bool(ba_flag)),
        format_version=version,
    )
    try:
        validate_map(m)
    except IntegrityError as exc:
        raise MapCorruptionError(f"map violates invariants: {exc}", offset=len(data)) from exc
    return m


def save_map(m: TrainedMap, destination) -> int:
    data = serialize_map(m)
    with open(destination, "wb") as f:
        f.write(data)
    return len(data)


def load_map(source) -> TrainedMap:
    with open(source, "rb") as f:
        data = f.read()
    return deserialize_map(data)


def nearest_keyframes(m: TrainedMap, query_pose: Pose, radius_m: float, k: int) -> list[int]:
    """Up to k keyframe ids within radius_m of the query position, nearest
    first; distance ties (within 1e-12 m) break toward the lower id."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    hits = []
    for kf in m.keyframes:
        d = float(np.linalg.norm(kf.pose.t - query_pose.t))
        if d <= radius_m:
            hits.append((int(round(d * 1e12)), kf.keyframe_id))
    hits.sort()
    return [kf_id for _, kf_id in hits[:k]]


def maps_equal(a: TrainedMap, b: TrainedMap) -> bool:
    """Field-for-field equality with bit-exact floats."""
    if a.format_version != b.format_version:
        return False
    ma, mb = a.metadata, b.metadata
    if (
        ma.scenario_name != mb.scenario_name
        or ma.creation_timestamp != mb.creation_timestamp
        or ma.training_seed != mb.training_seed
        or ma.global_ba_done != mb.global_ba_done
        or ma.start_pose.q.tobytes() != mb.start_pose.q.tobytes()
        or ma.start_pose.t.tobytes() != mb.start_pose.t.tobytes()
    ):
        return False
    for cam_id in CAMERA_IDS:
        ca, cb = a.rig.camera(cam_id), b.rig.camera(cam_id)
        if (
            ca.intrinsics.focal != cb.intrinsics.focal
            or ca.intrinsics.theta_max != cb.intrinsics.theta_max
            or ca.intrinsics.principal_point.tobytes() != cb.intrinsics.principal_point.tobytes()
            or ca.intrinsics.image_size.tobytes() != cb.intrinsics.image_size.tobytes()
            or ca.cam_from_vehicle.q.tobytes() != cb.cam_from_vehicle.q.tobytes()
            or ca.cam_from_vehicle.t.tobytes() != cb.cam_from_vehicle.t.tobytes()
        ):
            return False
    if len(a.landmarks) != len(b.landmarks) or len(a.keyframes) != len(b.keyframes):
        return False
    for la, lb in zip(a.landmarks, b.landmarks):
        if (
            la.landmark_id != lb.landmark_id
            or la.position.tobytes() != lb.position.tobytes()
            or la.descriptor != lb.descriptor
            or la.semantic_class != lb.semantic_class
            or la.observation_count != lb.observation_count
        ):
            return False
    for ka, kb in zip(a.keyframes, b.keyframes):
        if (
            ka.keyframe_id != kb.keyframe_id
            or ka.frame_index != kb.frame_index
            or ka.pose.q.tobytes() != kb.pose.q.tobytes()
            or ka.pose.t.tobytes() != kb.pose.t.tobytes()
            or len(ka.observations) != len(kb.observations)
        ):
            return False
        for oa, ob in zip(ka.observations, kb.observations):
            if (
                oa.camera_id != ob.camera_id
                or oa.pixel.tobytes() != ob.pixel.tobytes()
                or oa.landmark_id != ob.landmark_id
                or oa.weight != ob.weight
                or oa.descriptor != ob.descriptor
            ):
                return False
    return True


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def dump_map(m: TrainedMap) -> str:
    """Lossless human-readable dump; parse_map inverts it bit-exactly."""
    validate_map(m)
    md = m.metadata
    lines = [
        f"ttpm {m.format_version}",
        f"scenario {md.scenario_name}".rstrip(),
        f"timestamp {md.creation_timestamp!r}",
        f"seed {md.training_seed}",
        f"start_pose {_fmt(md.start_pose.q)} {_fmt(md.start_pose.t)}",
        f"global_ba {1 if md.global_ba_done else 0}",
    ]
    for cam_id in CAMERA_IDS:
        cam = m.rig.camera(cam_id)
        intr = cam.intrinsics
        lines.append(
            f"camera {cam_id} {intr.focal!r} {_fmt(intr.principal_point)} "
            f"{_fmt(intr.image_size)} {intr.theta_max!r} "
            f"{_fmt(cam.cam_from_vehicle.q)} {_fmt(cam.cam_from_vehicle.t)}"
        )
    for lm in m.landmarks:
        lines.append(
            f"landmark {_fmt(lm.position)} {lm.semantic_class} "
            f"{lm.descriptor.hex()} {lm.observation_count}"
        )
    for kf in m.keyframes:
        lines.append(f"keyframe {kf.frame_index} {_fmt(kf.pose.q)} {_fmt(kf.pose.t)}")
        for obs in kf.observations:
            lines.append(
                f"obs {obs.camera_id} {_fmt(obs.pixel)} {obs.landmark_id} "
                f"{obs.weight!r} {obs.descriptor.hex()}"
            )
    return "\n".join(lines) + "\n"


def parse_map(text: str) -> TrainedMap:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("ttpm"):
        raise NotAMapError("text dump must start with a ttpm version line")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"text dump version {version} not supported")

    md = MapMetadata()
    cameras: list[RigCamera] = []
    landmarks: list[MapLandmark] = []
    keyframes: list[Keyframe] = []
    for ln in lines[1:]:
        kind, _, rest = ln.partition(" ")
        parts = rest.split()
        if kind == "scenario":
            md.scenario_name = rest
        elif kind == "timestamp":
            md.creation_timestamp = float(parts[0])
        elif kind == "seed":
            md.training_seed = int(parts[0])
        elif kind == "start_pose":
            vals = [float(x) for x in parts]
            md.start_pose = Pose(vals[:4], vals[4:])
        elif kind == "global_ba":
            md.global_ba_done = parts[0] == "1"
        elif kind == "camera":
            vals = [float(x) for x in parts[1:]]
            intr = FisheyeIntrinsics(vals[0], vals[1:3], vals[3:5], vals[5])
            cameras.append(RigCamera(parts[0], intr, Pose(vals[6:10], vals[10:13])))
        elif kind == "landmark":
            landmarks.append(
                MapLandmark(
                    landmark_id=len(landmarks),
                    position=[float(x) for x in parts[0:3]],
                    semantic_class=parts[3],
                    descriptor=bytes.fromhex(parts[4]),
                    observation_count=int(parts[5]),
                )
            )
        elif kind == "keyframe":
            vals = [float(x) for x in parts[1:]]
            keyframes.append(
                Keyframe(len(keyframes), int(parts[0]), Pose(vals[:4], vals[4:7]))
            )
        elif kind == "obs":
            if not keyframes:
                raise ValueError("obs record before any keyframe")
            keyframes[-1].observations.append(
                MapObservation(
                    camera_id=parts[0],
                    pixel=[float(parts[1]), float(parts[2])],
                    landmark_id=int(parts[3]),
                    weight=float(parts[4]),
                    descriptor=bytes.fromhex(parts[5]),
                )
            )
        else:
            raise ValueError(f"unknown record type {kind!r} in map dump")
    m = TrainedMap(CameraRig(cameras), keyframes, landmarks, md)
    validate_map(m)
    return m
