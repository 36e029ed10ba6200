"""Flat ``key = value`` scenario configuration for the command-line harness.

Keys use dotted section prefixes (``perturbation.descriptor_flip_prob = 0.1``);
``#`` starts a comment.  Unknown keys, duplicate keys, and out-of-range values
are rejected with the offending key and line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .ba import BAConfig
from .errors import ConfigError
from .features import SEMANTIC_CLASSES
from .geometry import CameraRig, default_rig
from .replay import ReplayConfig
from .simworld import TRAJECTORY_PRESETS, PerturbationSpec, TrajectorySpec

__all__ = [
    "DEFAULT_CLASS_MIX",
    "RigConfig",
    "ScenarioConfig",
    "WorldConfig",
    "parse_config",
    "parse_config_file",
]

DEFAULT_CLASS_MIX = {
    "building": 0.45,
    "road_marking": 0.2,
    "curb": 0.15,
    "vegetation": 0.12,
    "vehicle": 0.08,
}


@dataclass
class WorldConfig:
    n_landmarks: int = 200
    extent: tuple = (45.0, 12.0, 5.0)
    class_mix: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_MIX))
    seed: int = 21


@dataclass
class RigConfig:
    focal_px: float = 300.0
    image_width: float = 1280.0
    image_height: float = 800.0
    theta_max_deg: float = 95.0

    def build(self) -> CameraRig:
        return default_rig(
            self.focal_px, (self.image_width, self.image_height), self.theta_max_deg
        )


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    out_dir: str = "out"
    world: WorldConfig = field(default_factory=WorldConfig)
    # 0.4 m spacing keeps frame-to-frame motion clear of the 0.5 m keyframe
    # threshold, so keyframe counts are stable against rounding differences
    trajectory: TrajectorySpec = field(
        default_factory=lambda: TrajectorySpec(length_m=20.0, frame_spacing_m=0.4)
    )
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    rig: RigConfig = field(default_factory=RigConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)


_SECTIONS = ("world", "trajectory", "perturbation", "rig", "ba", "replay")
_TOP_LEVEL = ("name", "seed", "out_dir")


def _parse_extent(raw: str):
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError("extent needs three comma-separated values")
    return tuple(float(p) for p in parts)


def _parse_class_mix(raw: str):
    mix = {}
    for item in raw.split(","):
        name, sep, weight = item.strip().partition(":")
        if not sep:
            raise ValueError(f"class_mix entry {item.strip()!r} is not name:weight")
        name = name.strip()
        if name not in SEMANTIC_CLASSES:
            raise ValueError(f"unknown semantic class {name!r}")
        if name in mix:
            raise ValueError(f"semantic class {name!r} listed twice")
        mix[name] = float(weight)
    return mix


def _convert(raw: str, template):
    if isinstance(template, bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(f"{raw!r} is not a boolean")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return _parse_extent(raw)
    if isinstance(template, dict):
        return _parse_class_mix(raw)
    return raw


def _split_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        yield lineno, key, value


def parse_config(text: str) -> ScenarioConfig:
    """Parse a scenario config; raises ConfigError naming the key and line."""
    config = ScenarioConfig()
    sections = {name: getattr(config, name) for name in _SECTIONS}
    seen: set[str] = set()
    lines: dict[str, int] = {}

    for lineno, key, value in _split_lines(text):
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        lines[key] = lineno

        section, dot, attr = key.partition(".")
        if not dot:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            target, attr = config, key
        elif section in _SECTIONS:
            target = sections[section]
            if attr not in {f.name for f in fields(target)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

        try:
            setattr(target, attr, _convert(value, getattr(target, attr)))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc

    _validate(config, lines)
    return config


def parse_config_file(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def _validate(config: ScenarioConfig, lines: dict[str, int]) -> None:
    def fail(key: str, detail: str):
        at = f"line {lines[key]}: " if key in lines else ""
        raise ConfigError(f"{at}{key} {detail}")

    def positive(key: str, value):
        if value <= 0:
            fail(key, f"must be positive, got {value}")

    def unit_interval(key: str, value):
        if not 0.0 <= value <= 1.0:
            fail(key, f"must be within [0, 1], got {value}")

    world, traj, pert, rig = config.world, config.trajectory, config.perturbation, config.rig
    positive("world.n_landmarks", world.n_landmarks)
    if len(world.extent) != 3 or min(world.extent) <= 0:
        fail("world.extent", f"must be three positive lengths, got {world.extent}")
    if not world.class_mix:
        fail("world.class_mix", "must not be empty")
    if min(world.class_mix.values()) < 0 or sum(world.class_mix.values()) <= 0:
        fail("world.class_mix", "weights must be >= 0 and sum > 0")

    if traj.preset not in TRAJECTORY_PRESETS:
        fail("trajectory.preset", f"must be one of {sorted(TRAJECTORY_PRESETS)}")
    positive("trajectory.length_m", traj.length_m)
    positive("trajectory.frame_spacing_m", traj.frame_spacing_m)

    for name in ("descriptor_flip_prob", "landmark_churn_frac", "dropout_prob"):
        unit_interval(f"perturbation.{name}", getattr(pert, name))
    for name in ("pixel_noise_sigma", "gps_pos_sigma_m", "gps_yaw_sigma_deg"):
        if getattr(pert, name) < 0:
            fail(f"perturbation.{name}", "must be >= 0")

    positive("rig.focal_px", rig.focal_px)
    positive("rig.image_width", rig.image_width)
    positive("rig.image_height", rig.image_height)
    if not 0.0 < rig.theta_max_deg < 180.0:
        fail("rig.theta_max_deg", f"must be within (0, 180), got {rig.theta_max_deg}")

    if not config.out_dir:
        fail("out_dir", "must not be empty")

    # BAConfig and ReplayConfig validate in __post_init__ on construction,
    # but fields assigned after parse bypass that; re-run their checks.
    try:
        BAConfig(**{f.name: getattr(config.ba, f.name) for f in fields(config.ba)})
        ReplayConfig(**{f.name: getattr(config.replay, f.name) for f in fields(config.replay)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
