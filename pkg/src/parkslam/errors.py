"""Exception types shared across the package.

Plain precondition violations (wrong arity, bad argument values) raise
ValueError; the classes here mark domain outcomes callers are expected to
catch and route (tracking loss, map corruption, degenerate geometry).
"""

from __future__ import annotations


class ParkslamError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(ParkslamError):
    """Invalid configuration value or unparseable config input."""


class DegenerateInputError(ParkslamError):
    """Geometric input too close to a singularity (e.g. point at camera center)."""


class OutOfModelError(ParkslamError):
    """Pixel maps to a ray outside the camera model's field of view."""


class DegenerateBaselineError(ParkslamError):
    """Triangulation rays too close to parallel to intersect reliably."""


class BootstrapError(ParkslamError):
    """Map initialization failed (too little data or parallax)."""


class TrackingLostError(ParkslamError):
    """Frame-to-map tracking failed during training."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class PoseEstimationError(ParkslamError):
    """RANSAC pose solve did not reach an acceptable inlier consensus."""


class RankDeficiencyError(ParkslamError):
    """Bundle adjustment system is under-constrained; message names the block."""


class IntegrityError(ParkslamError):
    """A map violates its structural invariants (dangling references, empty map)."""


class MapFormatError(ParkslamError):
    """Base for persisted-map read failures."""


class NotAMapError(MapFormatError):
    """Input bytes do not start with the map magic."""


class UnsupportedVersionError(MapFormatError):
    """Map file version is newer than this reader supports."""


class MapCorruptionError(MapFormatError):
    """Map file is truncated or fails its checksum."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class InitializationError(ParkslamError):
    """Replay coarse initialization found no candidate keyframes."""


class AlignmentError(ParkslamError):
    """Evaluation inputs do not line up frame-for-frame."""
