"""Greedy ordering, adaptive-length subsequences, multi-threshold planning and aggregation.

Every ``sim`` of the greedy algorithms is a dissimilarity: the next frame is
the argmin against the current tail, and a subsequence is cut as soon as the
threshold measure of the next transition exceeds the round's epsilon. Ties
always resolve to the lowest frame id.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, NamedTuple, Sequence, TypeVar

import numpy as np

from dataset_io import DatasetError, MultiViewSet
from similarity import MeasureKind, Scorer, pose_angle_to_origin

log = logging.getLogger(__name__)

MISALIGNMENT_THRESHOLD = math.pi / 4

T = TypeVar("T")


class AggregateError(ValueError):
    """Raised when upsampled subsequences do not satisfy the plan's contract."""


class ThresholdMode(str, Enum):
    VALUE = "value"
    # Experimental: epsilon is a candidate count, see Scorer.candidate_ranks.
    CANDIDATE_RANK = "candidate_rank"


class StartPolicy(str, Enum):
    EVERY_IMAGE = "every_image"
    SINGLE_START = "single_start"


@dataclass(frozen=True)
class OrderingConfig:
    select_measure: MeasureKind = MeasureKind.ORB_MEAN_MATCH
    threshold_measure: MeasureKind = MeasureKind.POSE_ANGLE_TO_ORIGIN
    thresholds: tuple[float, ...] = (math.radians(15.0), math.radians(30.0), math.radians(45.0))
    min_subseq_len: int = 8
    start_policy: StartPolicy = StartPolicy.EVERY_IMAGE
    start_frame: int | None = None
    threshold_mode: ThresholdMode = ThresholdMode.VALUE
    misalignment_threshold: float = MISALIGNMENT_THRESHOLD

    def __post_init__(self) -> None:
        object.__setattr__(self, "select_measure", MeasureKind(self.select_measure))
        object.__setattr__(self, "threshold_measure", MeasureKind(self.threshold_measure))
        object.__setattr__(self, "start_policy", StartPolicy(self.start_policy))
        object.__setattr__(self, "threshold_mode", ThresholdMode(self.threshold_mode))
        object.__setattr__(self, "thresholds", tuple(float(value) for value in self.thresholds))
        if not self.thresholds:
            raise ValueError("at least one threshold is required")
        if any(b < a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be ordered strictest first, got {list(self.thresholds)}")
        if self.min_subseq_len < 1:
            raise ValueError("min_subseq_len must be at least 1")
        if self.start_policy is StartPolicy.SINGLE_START and self.start_frame is None:
            raise ValueError("single_start needs a start_frame")

    @property
    def measures(self) -> set[MeasureKind]:
        measures = {self.select_measure}
        if self.threshold_mode is ThresholdMode.CANDIDATE_RANK:
            measures.add(MeasureKind.POSE_CENTER_DISTANCE)
        else:
            measures.add(self.threshold_measure)
        return measures


@dataclass(frozen=True)
class Subsequence:
    subseq_id: int
    round: int
    start_frame: int
    frames: tuple[int, ...]
    transition_scores: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if len(self.transition_scores) != max(len(self.frames) - 1, 0):
            raise ValueError(f"subsequence {self.subseq_id}: one score pair per transition is required")
        if len(set(self.frames)) != len(self.frames):
            raise ValueError(f"subsequence {self.subseq_id} repeats a frame")

    def __len__(self) -> int:
        return len(self.frames)


class Provenance(NamedTuple):
    round: int
    subseq_id: int
    position: int


@dataclass
class CoverageState:
    covered: set[int] = field(default_factory=set)
    provenance: dict[int, Provenance] = field(default_factory=dict)

    def claim(self, subsequence: Subsequence) -> int:
        """Mark a subsequence's frames covered; earlier claims win. Returns newly covered count."""
        fresh = 0
        for position, frame_id in enumerate(subsequence.frames):
            candidate = Provenance(subsequence.round, subsequence.subseq_id, position)
            current = self.provenance.get(frame_id)
            if current is None:
                fresh += 1
            if current is None or candidate < current:
                self.provenance[frame_id] = candidate
                self.covered.add(frame_id)
        return fresh


class Plan(NamedTuple):
    subsequences: list[Subsequence]
    coverage: CoverageState


@dataclass(frozen=True)
class MisalignmentReport:
    count: int
    offending_pairs: tuple[tuple[int, int, float], ...] = ()


def _extend(
    select: np.ndarray,
    start: int,
    threshold: np.ndarray | None = None,
    epsilon: float = math.inf,
) -> tuple[list[int], list[tuple[float, float]]]:
    size = select.shape[0]
    remaining = np.ones(size, dtype=bool)
    remaining[start] = False
    order = [start]
    scores: list[tuple[float, float]] = []
    while remaining.any():
        tail = order[-1]
        candidates = np.flatnonzero(remaining)
        # argmin returns the first minimum: the lowest id, also when every score is +inf.
        pick = int(candidates[int(np.argmin(select[tail, candidates]))])
        chosen = float(select[tail, pick])
        if threshold is None:
            gate = chosen
        else:
            gate = float(threshold[tail, pick])
            if math.isinf(gate) or gate > epsilon:
                break
        order.append(pick)
        scores.append((chosen, gate))
        remaining[pick] = False
    return order, scores


def _subsequence(
    scorer: Scorer, subseq_id: int, round_index: int, order: list[int], scores: list[tuple[float, float]]
) -> Subsequence:
    frames = tuple(scorer.ids[position] for position in order)
    return Subsequence(
        subseq_id=subseq_id,
        round=round_index,
        start_frame=frames[0],
        frames=frames,
        transition_scores=tuple(scores),
    )


def greedy_order(scorer: Scorer, measure: MeasureKind, start: int) -> Subsequence:
    """Order every frame by repeatedly appending the nearest remaining neighbour of the tail."""
    order, scores = _extend(scorer.matrix(measure), scorer.index_of(start))
    return _subsequence(scorer, 0, 0, order, scores)


def threshold_matrix(scorer: Scorer, config: OrderingConfig) -> np.ndarray:
    if config.threshold_mode is ThresholdMode.CANDIDATE_RANK:
        return scorer.candidate_ranks()
    return scorer.matrix(config.threshold_measure)


def adaptive_length_subsequences(
    scorer: Scorer,
    config: OrderingConfig,
    epsilon: float,
    start_frames: Sequence[int],
    *,
    round_index: int = 0,
    first_id: int = 0,
) -> list[Subsequence]:
    """One subsequence per start, each greedily extended over the full pool until
    the next transition's threshold score exceeds ``epsilon`` or is undefined."""
    select = scorer.matrix(config.select_measure)
    gate = threshold_matrix(scorer, config)
    subsequences = []
    for offset, start in enumerate(start_frames):
        order, scores = _extend(select, scorer.index_of(start), gate, epsilon)
        subsequences.append(_subsequence(scorer, first_id + offset, round_index, order, scores))
    return subsequences


def multi_threshold_plan(scorer: Scorer, config: OrderingConfig) -> Plan:
    """Run one adaptive-length round per threshold, strictest first.

    Only frames still uncovered at the start of a round serve as starts, while
    neighbours are drawn from every frame. Subsequences shorter than
    ``min_subseq_len`` are dropped. Frames left after the last round become
    singleton subsequences.
    """
    coverage = CoverageState()
    subsequences: list[Subsequence] = []
    everything = sorted(scorer.ids)
    if config.start_policy is StartPolicy.SINGLE_START and config.start_frame not in everything:
        raise DatasetError(f"start_frame {config.start_frame} is not one of the {len(everything)} frames")

    for round_index, epsilon in enumerate(config.thresholds):
        if config.start_policy is StartPolicy.SINGLE_START and round_index == 0:
            starts = [config.start_frame]
        else:
            starts = [frame_id for frame_id in everything if frame_id not in coverage.covered]
        if not starts:
            log.info("round %s (eps=%.6g): all frames covered, nothing to do", round_index, epsilon)
            continue

        produced = adaptive_length_subsequences(
            scorer, config, epsilon, starts, round_index=round_index, first_id=len(subsequences)
        )
        accepted = [seq for seq in produced if len(seq) >= config.min_subseq_len]
        # Renumber so subseq ids stay dense across rounds.
        for seq in accepted:
            seq = Subsequence(
                subseq_id=len(subsequences),
                round=seq.round,
                start_frame=seq.start_frame,
                frames=seq.frames,
                transition_scores=seq.transition_scores,
            )
            subsequences.append(seq)
            coverage.claim(seq)
        log.info(
            "round %s (eps=%.6g): %s starts, %s accepted, %s/%s frames covered",
            round_index, epsilon, len(starts), len(accepted), len(coverage.covered), len(everything),
        )

    singleton_round = len(config.thresholds)
    leftovers = [frame_id for frame_id in everything if frame_id not in coverage.covered]
    for frame_id in leftovers:
        seq = Subsequence(subseq_id=len(subsequences), round=singleton_round, start_frame=frame_id, frames=(frame_id,))
        subsequences.append(seq)
        coverage.claim(seq)
    if leftovers:
        log.info("%s frames fall back to single-image upsampling", len(leftovers))
    return Plan(subsequences, coverage)


def aggregate(upsampled: Mapping[int, Sequence[T]], plan: Plan) -> dict[int, T]:
    """Keep exactly one output per frame, taken from its earliest subsequence."""
    subsequences, coverage = plan
    for seq in subsequences:
        if seq.subseq_id not in upsampled:
            raise AggregateError(f"missing upsampled output for subsequence {seq.subseq_id}")
        produced = len(upsampled[seq.subseq_id])
        if produced != len(seq):
            raise AggregateError(
                f"subsequence {seq.subseq_id}: expected {len(seq)} upsampled frames, got {produced}"
            )
    planned = {frame_id for seq in subsequences for frame_id in seq.frames}
    if planned != set(coverage.provenance):
        raise AggregateError("plan coverage does not match its subsequences")

    result: dict[int, T] = {}
    for frame_id in sorted(coverage.provenance):
        source = coverage.provenance[frame_id]
        result[frame_id] = upsampled[source.subseq_id][source.position]
    return result


def _transition_angles(frames: Sequence[int], views: MultiViewSet) -> list[float | None]:
    angles: list[float | None] = []
    for a, b in zip(frames, frames[1:]):
        score = pose_angle_to_origin(views.frame(a).pose, views.frame(b).pose, views.origin)
        angles.append(score.value if score.defined else None)
    return angles


def count_misalignments(
    seq: Subsequence | Sequence[int], views: MultiViewSet, threshold: float = MISALIGNMENT_THRESHOLD
) -> MisalignmentReport:
    """Consecutive pairs whose origin-to-camera vectors differ by more than ``threshold``."""
    frames = seq.frames if isinstance(seq, Subsequence) else tuple(seq)
    offending = tuple(
        (a, b, angle)
        for (a, b), angle in zip(zip(frames, frames[1:]), _transition_angles(frames, views))
        if angle is not None and angle > threshold
    )
    return MisalignmentReport(count=len(offending), offending_pairs=offending)


def misalignment_profile(
    frames: Sequence[int], views: MultiViewSet, threshold: float = MISALIGNMENT_THRESHOLD, bins: int = 4
) -> list[int]:
    """Misaligned transitions per equal-width position bin along the sequence."""
    counts = [0] * bins
    transitions = len(frames) - 1
    for index, angle in enumerate(_transition_angles(frames, views)):
        if angle is not None and angle > threshold:
            counts[min(index * bins // transitions, bins - 1)] += 1
    return counts


def tail_misalignment_split(
    frames: Sequence[int],
    views: MultiViewSet,
    threshold: float = MISALIGNMENT_THRESHOLD,
    tail_fraction: float = 0.25,
) -> tuple[int, int]:
    """(head, tail) misalignment counts; a transition belongs to the tail when
    the frame it arrives at lies in the last ``tail_fraction`` of positions."""
    cut = len(frames) - math.ceil(len(frames) * tail_fraction)
    head = tail = 0
    for index, angle in enumerate(_transition_angles(frames, views)):
        if angle is None or angle <= threshold:
            continue
        if index + 1 >= cut:
            tail += 1
        else:
            head += 1
    return head, tail


def all_starts_baseline(
    scorer: Scorer,
    measure: MeasureKind,
    views: MultiViewSet,
    threshold: float = MISALIGNMENT_THRESHOLD,
    tail_fraction: float = 0.25,
    bins: int = 4,
) -> dict:
    """Greedy orders over all frames from every start, with misalignments summed across them."""
    head = tail = affected = 0
    profile = [0] * bins
    for start in scorer.ids:
        frames = greedy_order(scorer, measure, start).frames
        start_head, start_tail = tail_misalignment_split(frames, views, threshold, tail_fraction)
        head += start_head
        tail += start_tail
        affected += (start_head + start_tail) > 0
        profile = [a + b for a, b in zip(profile, misalignment_profile(frames, views, threshold, bins))]
    return {
        "starts": len(scorer.ids),
        "orders_with_misalignments": affected,
        "misaligned_transitions": head + tail,
        "profile_bins": profile,
        "tail_fraction": tail_fraction,
        "head": head,
        "tail": tail,
    }


def plan_statistics(plan: Plan, views: MultiViewSet, threshold: float = MISALIGNMENT_THRESHOLD) -> dict:
    subsequences, coverage = plan
    lengths = Counter(len(seq) for seq in subsequences)
    per_round = Counter(source.round for source in coverage.provenance.values())
    return {
        "subsequence_count": len(subsequences),
        "frame_count": len(views),
        "covered": len(coverage.covered),
        "length_histogram": {str(length): lengths[length] for length in sorted(lengths)},
        "coverage_per_round": {str(round_index): per_round[round_index] for round_index in sorted(per_round)},
        "misalignments": [
            {"subseq_id": seq.subseq_id, "round": seq.round, "count": count_misalignments(seq, views, threshold).count}
            for seq in subsequences
        ],
    }
