"""Binary descriptors, Hamming matching, and semantic feature weighting.

Descriptors are fixed 256-bit strings stored as 32-byte ``bytes``.  Semantic
classes carry a static weight in [0, 1]: features on movable objects (vehicles,
pedestrians) get weight 0 so downstream solvers exclude them, vegetation gets
0.5, and permanent structure gets 1.  Zero-weight matches are retained in the
match set but flagged by their weight; solvers multiply residuals by the
weight, so 0 means excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DESCRIPTOR_BYTES = 32
DESCRIPTOR_BITS = 8 * DESCRIPTOR_BYTES

# name -> (code, weight); codes are the wire format for maps and scene files
SEMANTIC_CLASSES = {
    "building": (0, 1.0),
    "vegetation": (1, 0.5),
    "road_marking": (2, 1.0),
    "curb": (3, 1.0),
    "vehicle": (4, 0.0),
    "pedestrian": (5, 0.0),
}
_CODE_TO_NAME = {code: name for name, (code, _) in SEMANTIC_CLASSES.items()}

DEFAULT_MAX_DIST = 64
DEFAULT_RATIO = 0.7

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def class_code(semantic_class: str | int) -> int:
    """Canonical integer code for a class given by name or code."""
    if isinstance(semantic_class, str):
        try:
            return SEMANTIC_CLASSES[semantic_class][0]
        except KeyError:
            raise ConfigError(f"unknown semantic class {semantic_class!r}") from None
    code = int(semantic_class)
    if code not in _CODE_TO_NAME:
        raise ConfigError(f"unknown semantic class code {code}")
    return code


def class_name(semantic_class: str | int) -> str:
    return _CODE_TO_NAME[class_code(semantic_class)]


def semantic_weight(semantic_class: str | int) -> float:
    return SEMANTIC_CLASSES[class_name(semantic_class)][1]


def _check_descriptor(d: bytes) -> None:
    if len(d) != DESCRIPTOR_BYTES:
        raise ValueError(f"descriptor must be {DESCRIPTOR_BYTES} bytes, got {len(d)}")


def hamming(a: bytes, b: bytes) -> int:
    _check_descriptor(a)
    _check_descriptor(b)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).bit_count()


def descriptors_to_matrix(descriptors) -> np.ndarray:
    """Pack descriptors into a (n, 32) uint8 matrix for batch distance work."""
    for d in descriptors:
        _check_descriptor(d)
    if not descriptors:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return np.frombuffer(b"".join(descriptors), dtype=np.uint8).reshape(
        len(descriptors), DESCRIPTOR_BYTES
    )


def matrix_to_descriptors(matrix: np.ndarray) -> list[bytes]:
    matrix = np.ascontiguousarray(matrix, dtype=np.uint8)
    return [row.tobytes() for row in matrix]


def hamming_matrix(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between (nq, 32) and (nc, 32) uint8 rows."""
    xor = query[:, None, :] ^ candidates[None, :, :]
    return _POPCOUNT[xor].sum(axis=2).astype(np.int64)


@dataclass(frozen=True)
class Match:
    query_index: int
    landmark_id: int
    distance: int
    weight: float


def match(
    query,
    candidates,
    max_dist: int = DEFAULT_MAX_DIST,
    ratio: float = DEFAULT_RATIO,
) -> list[Match]:
    """Match query descriptors against (landmark_id, descriptor, class) triples.

    A query matches its nearest candidate when the distance is within
    ``max_dist``, the best/second-best ratio test passes (skipped with fewer
    than two candidates), and the pair is mutually nearest.  The cross-check
    makes the result injective on landmark ids.  Ties in nearest-candidate
    selection resolve to the lowest index, keeping results deterministic.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if not candidates:
        return []
    q_mat = descriptors_to_matrix(list(query))
    c_mat = descriptors_to_matrix([c[1] for c in candidates])
    if q_mat.shape[0] == 0:
        return []
    dist = hamming_matrix(q_mat, c_mat)

    best_j = np.argmin(dist, axis=1)
    best_d = dist[np.arange(dist.shape[0]), best_j]
    best_i_per_candidate = np.argmin(dist, axis=0)

    matches: list[Match] = []
    for i in range(dist.shape[0]):
        j = int(best_j[i])
        d = int(best_d[i])
        if d > max_dist:
            continue
        if dist.shape[1] >= 2:
            row = dist[i].copy()
            row[j] = np.iinfo(row.dtype).max
            second = int(row.min())
            if d > ratio * second:
                continue
        if int(best_i_per_candidate[j]) != i:
            continue
        landmark_id, _, semantic_class = candidates[j]
        matches.append(
            Match(
                query_index=i,
                landmark_id=int(landmark_id),
                distance=d,
                weight=semantic_weight(semantic_class),
            )
        )
    return matches
