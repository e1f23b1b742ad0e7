from __future__ import annotations

import csv
import io
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from dataset_io import CameraPose, MultiViewSet, write_text_atomic
from orb import DESCRIPTOR_BITS, DescriptorSet, descriptor_bits

log = logging.getLogger(__name__)

DEFAULT_MIN_MATCHES = 8


class MeasureKind(str, Enum):
    ORB_MEAN_MATCH = "orb_mean_match"
    POSE_ANGLE_TO_ORIGIN = "pose_angle_to_origin"
    POSE_CENTER_DISTANCE = "pose_center_distance"
    POSE_DIRECTION_ANGLE = "pose_direction_angle"

    @property
    def needs_features(self) -> bool:
        return self is MeasureKind.ORB_MEAN_MATCH

    @property
    def is_angle(self) -> bool:
        return self in (MeasureKind.POSE_ANGLE_TO_ORIGIN, MeasureKind.POSE_DIRECTION_ANGLE)


@dataclass(frozen=True)
class Match:
    query: int
    train: int
    distance: int


@dataclass(frozen=True)
class Dissimilarity:
    value: float
    defined: bool = True

    @classmethod
    def undefined(cls) -> Dissimilarity:
        return cls(value=math.inf, defined=False)

    @property
    def rank_value(self) -> float:
        """Value used for selection: undefined pairs rank last."""
        return self.value if self.defined else math.inf


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.size * 8 != DESCRIPTOR_BITS or b.size * 8 != DESCRIPTOR_BITS:
        raise ValueError(f"descriptors must have {DESCRIPTOR_BITS} bits")
    return int(np.unpackbits(np.bitwise_xor(a, b)).sum())


def hamming_matrix(a_bits: np.ndarray, b_bits: np.ndarray) -> np.ndarray:
    """All pairwise Hamming distances between two unpacked bit tables."""
    a = a_bits.astype(np.float32)
    b = b_bits.astype(np.float32)
    # Exact in float32: every partial sum is an integer no larger than 256.
    distances = a @ (1.0 - b).T + (1.0 - a) @ b.T
    return np.rint(distances).astype(np.int32)


def _mutual_best(distances: np.ndarray) -> list[Match]:
    if distances.size == 0:
        return []
    forward = np.argmin(distances, axis=1)
    backward = np.argmin(distances, axis=0)
    return [
        Match(query=k, train=int(l), distance=int(distances[k, l]))
        for k, l in enumerate(forward)
        if backward[l] == k
    ]


def cross_check_match(a: DescriptorSet, b: DescriptorSet) -> list[Match]:
    """Mutual nearest neighbours under Hamming distance; argmin ties go to the lowest index."""
    return _mutual_best(hamming_matrix(descriptor_bits(a), descriptor_bits(b)))


def _orb_from_bits(a_bits: np.ndarray, b_bits: np.ndarray, min_matches: int) -> Dissimilarity:
    matches = _mutual_best(hamming_matrix(a_bits, b_bits))
    if not matches or len(matches) < min_matches:
        return Dissimilarity.undefined()
    return Dissimilarity(sum(match.distance for match in matches) / len(matches))


def orb_dissimilarity(
    a: DescriptorSet, b: DescriptorSet, min_matches: int = DEFAULT_MIN_MATCHES
) -> Dissimilarity:
    return _orb_from_bits(descriptor_bits(a), descriptor_bits(b), min_matches)


def _as_tuple(vector: Iterable[float]) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in vector)
    return x, y, z


def _angle_between(u: Sequence[float], v: Sequence[float]) -> float | None:
    nu = math.sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
    nv = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if nu == 0.0 or nv == 0.0:
        return None
    dot = (u[0] / nu) * (v[0] / nv) + (u[1] / nu) * (v[1] / nv) + (u[2] / nu) * (v[2] / nv)
    return math.acos(max(-1.0, min(1.0, dot)))


def _angle_to_origin(p: Sequence[float], q: Sequence[float], origin: Sequence[float]) -> Dissimilarity:
    u = (p[0] - origin[0], p[1] - origin[1], p[2] - origin[2])
    v = (q[0] - origin[0], q[1] - origin[1], q[2] - origin[2])
    angle = _angle_between(u, v)
    return Dissimilarity.undefined() if angle is None else Dissimilarity(angle)


def _center_distance(p: Sequence[float], q: Sequence[float]) -> Dissimilarity:
    return Dissimilarity(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2))


def _direction_angle(p: Sequence[float], q: Sequence[float]) -> Dissimilarity:
    angle = _angle_between(p, q)
    return Dissimilarity.undefined() if angle is None else Dissimilarity(angle)


def pose_angle_to_origin(
    p: CameraPose, q: CameraPose, origin: Sequence[float] = (0.0, 0.0, 0.0)
) -> Dissimilarity:
    """Angle between the origin-to-camera vectors; undefined for a camera at the origin."""
    return _angle_to_origin(_as_tuple(p.center), _as_tuple(q.center), _as_tuple(origin))


def pose_center_distance(p: CameraPose, q: CameraPose) -> Dissimilarity:
    return _center_distance(_as_tuple(p.center), _as_tuple(q.center))


def pose_direction_angle(p: CameraPose, q: CameraPose) -> Dissimilarity:
    return _direction_angle(_as_tuple(p.view_axis), _as_tuple(q.view_axis))


class Scorer:
    """Pairwise dissimilarities over one MultiViewSet.

    Matrices are indexed by position in ``ids`` (ascending frame id) and hold
    +inf for undefined pairs. They are computed once per measure; only the upper
    triangle is evaluated and then mirrored, so symmetry is exact.
    """

    def __init__(
        self,
        views: MultiViewSet,
        features: Mapping[int, DescriptorSet] | None = None,
        *,
        origin: Sequence[float] | None = None,
        min_matches: int = DEFAULT_MIN_MATCHES,
        workers: int | None = None,
    ) -> None:
        self.views = views
        frames = sorted(views.frames, key=lambda frame: frame.frame_id)
        self.ids: list[int] = [frame.frame_id for frame in frames]
        self.origin = _as_tuple(origin if origin is not None else views.origin)
        self.min_matches = min_matches
        self.workers = workers
        self._index = {frame_id: position for position, frame_id in enumerate(self.ids)}
        self._centers = [_as_tuple(frame.pose.center) for frame in frames]
        self._axes = [_as_tuple(frame.pose.view_axis) for frame in frames]
        self._features = features
        self._bits: list[np.ndarray] | None = None
        self._matrices: dict[MeasureKind, np.ndarray] = {}
        self._ranks: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, frame_id: int) -> int:
        try:
            return self._index[frame_id]
        except KeyError:
            raise KeyError(f"frame {frame_id} is not part of scene {self.views.scene_name}") from None

    def _feature_bits(self) -> list[np.ndarray]:
        if self._bits is None:
            if self._features is None:
                raise ValueError("the ORB measure needs descriptor sets for every frame")
            missing = [frame_id for frame_id in self.ids if frame_id not in self._features]
            if missing:
                raise ValueError(f"no descriptor set for frames {missing}")
            self._bits = [descriptor_bits(self._features[frame_id]) for frame_id in self.ids]
        return self._bits

    def _score_at(self, measure: MeasureKind, i: int, j: int) -> Dissimilarity:
        if measure is MeasureKind.ORB_MEAN_MATCH:
            bits = self._feature_bits()
            return _orb_from_bits(bits[i], bits[j], self.min_matches)
        if measure is MeasureKind.POSE_ANGLE_TO_ORIGIN:
            return _angle_to_origin(self._centers[i], self._centers[j], self.origin)
        if measure is MeasureKind.POSE_CENTER_DISTANCE:
            return _center_distance(self._centers[i], self._centers[j])
        if measure is MeasureKind.POSE_DIRECTION_ANGLE:
            return _direction_angle(self._axes[i], self._axes[j])
        raise ValueError(f"unknown measure {measure!r}")

    def score(self, measure: MeasureKind, a: int, b: int) -> Dissimilarity:
        """Dissimilarity between frames ``a`` and ``b`` (frame ids)."""
        return self._score_at(MeasureKind(measure), self.index_of(a), self.index_of(b))

    def matrix(self, measure: MeasureKind) -> np.ndarray:
        measure = MeasureKind(measure)
        with self._lock:
            cached = self._matrices.get(measure)
        if cached is not None:
            return cached

        size = len(self.ids)

        def row(i: int) -> list[float]:
            return [self._score_at(measure, i, j).rank_value for j in range(i + 1, size)]

        values = np.full((size, size), np.inf)
        if measure.needs_features:
            self._feature_bits()
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                rows = list(executor.map(row, range(size)))
        else:
            rows = [row(i) for i in range(size)]
        for i, upper in enumerate(rows):
            values[i, i + 1:] = upper
            values[i + 1:, i] = upper
        np.fill_diagonal(values, 0.0)
        values.setflags(write=False)

        with self._lock:
            self._matrices.setdefault(measure, values)
        log.debug("computed %s matrix for %s frames", measure.value, size)
        return self._matrices[measure]

    def candidate_ranks(self) -> np.ndarray:
        """1-based rank of each frame among all others by center distance from the row frame."""
        if self._ranks is None:
            distances = self.matrix(MeasureKind.POSE_CENTER_DISTANCE)
            size = len(self.ids)
            ranks = np.full((size, size), np.inf)
            for t in range(size):
                others = [c for c in range(size) if c != t]
                others.sort(key=lambda c: (distances[t, c], self.ids[c]))
                for rank, c in enumerate(others, start=1):
                    ranks[t, c] = float(rank)
            ranks[np.arange(size), np.arange(size)] = 0.0
            ranks.setflags(write=False)
            self._ranks = ranks
        return self._ranks

    def dump_scores_csv(self, path: str | Path, measures: Iterable[MeasureKind]) -> None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["i", "j", "measure", "value", "defined"])
        for measure in measures:
            values = self.matrix(measure)
            for i, a in enumerate(self.ids):
                for j, b in enumerate(self.ids):
                    if i == j:
                        continue
                    defined = bool(np.isfinite(values[i, j]))
                    writer.writerow([a, b, MeasureKind(measure).value, repr(float(values[i, j])) if defined else "", int(defined)])
        write_text_atomic(path, buffer.getvalue())
