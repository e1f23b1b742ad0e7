import math

import numpy as np
import pytest

from dataset_io import DatasetError
from orb import DESCRIPTOR_BYTES, DescriptorSet, Keypoint
from ordering import (
    AggregateError,
    CoverageState,
    OrderingConfig,
    Plan,
    StartPolicy,
    Subsequence,
    ThresholdMode,
    adaptive_length_subsequences,
    all_starts_baseline,
    aggregate,
    count_misalignments,
    greedy_order,
    misalignment_profile,
    multi_threshold_plan,
    plan_statistics,
    tail_misalignment_split,
)
from similarity import MeasureKind, Scorer
from rigs import circle_centers, make_views, random_centers, ring_degrees

ANGLE = MeasureKind.POSE_ANGLE_TO_ORIGIN
DISTANCE = MeasureKind.POSE_CENTER_DISTANCE
DEGREES_15_30_45 = tuple(math.radians(v) for v in (15.0, 30.0, 45.0))


def pose_config(**overrides) -> OrderingConfig:
    values = dict(select_measure=ANGLE, threshold_measure=ANGLE, thresholds=DEGREES_15_30_45, min_subseq_len=2)
    values.update(overrides)
    return OrderingConfig(**values)


def random_features(rng: np.random.Generator, frame_id: int) -> DescriptorSet:
    count = int(rng.integers(0, 24))
    return DescriptorSet(
        frame_id=frame_id,
        keypoints=tuple(Keypoint(x=0.0, y=0.0, score=1.0) for _ in range(count)),
        descriptors=rng.integers(0, 256, size=(count, DESCRIPTOR_BYTES), dtype=np.uint8),
    )


def naive_greedy(scorer: Scorer, measure: MeasureKind, start: int) -> list[int]:
    order = [start]
    remaining = set(scorer.ids) - {start}
    while remaining:
        tail = order[-1]
        pick = min(remaining, key=lambda c: (scorer.score(measure, tail, c).rank_value, c))
        order.append(pick)
        remaining.remove(pick)
    return order


def two_cluster_rig():
    """Thirty cameras spanning 0..58 degrees and six spanning 150..160 degrees."""
    degrees = [2.0 * i for i in range(30)] + [150.0 + 2.0 * i for i in range(6)]
    return make_views(circle_centers(degrees))


class TestGreedyOrder:
    def test_single_frame(self):
        scorer = Scorer(make_views(circle_centers([0.0])))
        assert greedy_order(scorer, ANGLE, 0).frames == (0,)

    def test_collinear_centers(self):
        scorer = Scorer(make_views([(float(x), 0.0, 0.0) for x in (0, 1, 3, 7)]))
        seq = greedy_order(scorer, DISTANCE, 0)
        assert seq.frames == (0, 1, 2, 3)
        assert [gate for _, gate in seq.transition_scores] == [1.0, 2.0, 4.0]

    def test_all_undefined_falls_back_to_lowest_id(self):
        views = make_views(circle_centers([0.0, 90.0, 180.0, 270.0]))
        empty = {frame_id: DescriptorSet(frame_id=frame_id) for frame_id in views.frame_ids}
        seq = greedy_order(Scorer(views, empty), MeasureKind.ORB_MEAN_MATCH, 2)
        assert seq.frames == (2, 0, 1, 3)
        assert all(math.isinf(select) for select, _ in seq.transition_scores)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(42)
        measures = list(MeasureKind)
        for instance in range(200):
            count = int(rng.integers(1, 65))
            views = make_views(random_centers(rng, count))
            measure = measures[instance % len(measures)]
            features = None
            if measure.needs_features:
                features = {frame_id: random_features(rng, frame_id) for frame_id in views.frame_ids}
            scorer = Scorer(views, features, min_matches=2)
            start = int(rng.integers(0, count))
            seq = greedy_order(scorer, measure, start)
            assert list(seq.frames) == naive_greedy(scorer, measure, start)
            assert sorted(seq.frames) == sorted(views.frame_ids)


class TestAdaptiveLength:
    def test_truncates_before_large_jump(self):
        scorer = Scorer(make_views(circle_centers([0.0, 20.0, 40.0, 170.0])))
        config = pose_config(thresholds=(math.radians(45.0),))
        [seq] = adaptive_length_subsequences(scorer, config, math.radians(45.0), [0])
        assert seq.frames == (0, 1, 2)

    def test_infinite_epsilon_reduces_to_greedy(self):
        scorer = Scorer(make_views(random_centers(np.random.default_rng(1), 15)))
        config = pose_config()
        for seq in adaptive_length_subsequences(scorer, config, math.inf, scorer.ids):
            assert len(seq) == 15
            assert seq.frames == greedy_order(scorer, ANGLE, seq.start_frame).frames

    def test_zero_epsilon_gives_singletons(self):
        scorer = Scorer(make_views(random_centers(np.random.default_rng(2), 10)))
        for seq in adaptive_length_subsequences(scorer, pose_config(), 0.0, scorer.ids):
            assert len(seq) == 1

    def test_undefined_threshold_truncates(self):
        scorer = Scorer(make_views([(1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0)]))
        config = pose_config(select_measure=DISTANCE)
        [seq] = adaptive_length_subsequences(scorer, config, math.pi, [0])
        assert seq.frames == (0,)

    def test_raising_epsilon_never_shortens(self):
        rng = np.random.default_rng(3)
        scorer = Scorer(make_views(random_centers(rng, 25)))
        config = pose_config(select_measure=DISTANCE)
        epsilons = [math.radians(v) for v in (5.0, 15.0, 30.0, 60.0, 120.0)]
        for start in scorer.ids:
            lengths = [len(adaptive_length_subsequences(scorer, config, eps, [start])[0]) for eps in epsilons]
            assert lengths == sorted(lengths)

    def test_candidate_rank_mode(self):
        scorer = Scorer(make_views([(float(x), 0.0, 1.0) for x in (0, 1, 2, 10, 11)]))
        config = OrderingConfig(
            select_measure=DISTANCE,
            threshold_measure=DISTANCE,
            threshold_mode=ThresholdMode.CANDIDATE_RANK,
            thresholds=(2,),
            min_subseq_len=1,
        )
        [seq] = adaptive_length_subsequences(scorer, config, 2, [0])
        assert seq.frames == (0, 1, 2)


class TestMultiThresholdPlan:
    def test_dense_ring_is_covered_in_the_first_round(self):
        views = make_views(circle_centers(ring_degrees(100)))
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=8))
        assert plan.coverage.covered == set(range(100))
        assert {source.round for source in plan.coverage.provenance.values()} == {0}
        assert all(seq.round == 0 for seq in plan.subsequences)

    def test_two_clusters_never_bridge(self):
        degrees = [0.0, 5.0, 10.0, 15.0, 90.0, 95.0, 100.0, 105.0]
        views = make_views(circle_centers(degrees))
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=2))
        assert plan.coverage.covered == set(range(8))
        for seq in plan.subsequences:
            assert {frame_id < 4 for frame_id in seq.frames} in ({True}, {False})

    def test_min_length_one_needs_one_round(self):
        views = make_views(random_centers(np.random.default_rng(4), 12))
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=1))
        assert len(plan.coverage.covered) == 12
        assert all(seq.round == 0 for seq in plan.subsequences)

    def test_leftovers_become_singletons(self):
        views = make_views(circle_centers([0.0, 5.0, 10.0, 120.0]))
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=3))
        singles = [seq for seq in plan.subsequences if len(seq) == 1]
        assert [seq.frames for seq in singles] == [(3,)]
        assert singles[0].round == 3
        assert plan.coverage.provenance[3].round == 3

    def test_single_start_policy(self):
        views = make_views(circle_centers([0.0, 5.0, 10.0, 15.0]))
        config = pose_config(start_policy=StartPolicy.SINGLE_START, start_frame=2, min_subseq_len=1)
        plan = multi_threshold_plan(Scorer(views), config)
        assert plan.subsequences[0].start_frame == 2
        assert len([seq for seq in plan.subsequences if seq.round == 0]) == 1

    def test_single_start_must_name_a_frame(self):
        views = make_views(circle_centers([0.0, 5.0, 10.0]))
        config = pose_config(start_policy=StartPolicy.SINGLE_START, start_frame=7)
        with pytest.raises(DatasetError, match="start_frame 7"):
            multi_threshold_plan(Scorer(views), config)

    def test_subseq_ids_are_dense(self):
        views = make_views(random_centers(np.random.default_rng(5), 20))
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=3))
        assert [seq.subseq_id for seq in plan.subsequences] == list(range(len(plan.subsequences)))

    def test_threshold_soundness_and_cardinality_on_random_rigs(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            count = int(rng.integers(2, 31))
            views = make_views(random_centers(rng, count))
            config = pose_config(select_measure=DISTANCE, min_subseq_len=int(rng.integers(1, 6)))
            scorer = Scorer(views)
            plan = multi_threshold_plan(scorer, config)
            for seq in plan.subsequences:
                if seq.round >= len(config.thresholds):
                    assert len(seq) == 1
                    continue
                epsilon = config.thresholds[seq.round]
                for a, b in zip(seq.frames, seq.frames[1:]):
                    assert scorer.score(ANGLE, a, b).value <= epsilon

            upsampled = {seq.subseq_id: [(seq.subseq_id, f) for f in seq.frames] for seq in plan.subsequences}
            result = aggregate(upsampled, plan)
            assert sorted(result) == views.frame_ids
            assert all(frame_id == source_frame for frame_id, (_, source_frame) in result.items())
            provenance = list(plan.coverage.provenance.values())
            assert len(set(provenance)) == len(provenance) == count

    def test_config_validation(self):
        with pytest.raises(ValueError):
            pose_config(thresholds=(0.5, 0.2))
        with pytest.raises(ValueError):
            pose_config(thresholds=())
        with pytest.raises(ValueError):
            pose_config(start_policy=StartPolicy.SINGLE_START)
        with pytest.raises(ValueError):
            pose_config(min_subseq_len=0)


class TestAggregate:
    def plan_with_overlap(self) -> Plan:
        first = Subsequence(0, 0, 0, (0, 1, 2), ((0.1, 0.1), (0.1, 0.1)))
        second = Subsequence(1, 1, 3, (3, 2, 1), ((0.2, 0.2), (0.2, 0.2)))
        coverage = CoverageState()
        coverage.claim(first)
        coverage.claim(second)
        return Plan([first, second], coverage)

    def test_earliest_subsequence_wins(self):
        plan = self.plan_with_overlap()
        result = aggregate({0: ["a0", "a1", "a2"], 1: ["b3", "b2", "b1"]}, plan)
        assert result == {0: "a0", 1: "a1", 2: "a2", 3: "b3"}

    def test_claim_prefers_earlier_provenance(self):
        coverage = CoverageState()
        late = Subsequence(4, 2, 5, (5,), ())
        early = Subsequence(2, 1, 7, (7, 5), ((0.0, 0.0),))
        assert coverage.claim(late) == 1
        assert coverage.claim(early) == 1
        assert coverage.provenance[5] == (1, 2, 1)

    def test_missing_output(self):
        with pytest.raises(AggregateError, match="subsequence 1"):
            aggregate({0: ["a0", "a1", "a2"]}, self.plan_with_overlap())

    def test_length_mismatch(self):
        with pytest.raises(AggregateError, match="subsequence 0"):
            aggregate({0: ["a0", "a1"], 1: ["b3", "b2", "b1"]}, self.plan_with_overlap())


class TestMisalignment:
    def test_counts_large_jumps(self):
        views = make_views(circle_centers([0.0, 30.0, 80.0]))
        report = count_misalignments([0, 1, 2], views)
        assert report.count == 1
        assert report.offending_pairs[0][:2] == (1, 2)
        assert report.offending_pairs[0][2] == pytest.approx(math.radians(50.0))

    def test_threshold_pi_never_fires(self):
        views = make_views(random_centers(np.random.default_rng(7), 10))
        assert count_misalignments(list(range(10)), views, math.pi).count == 0

    def test_single_frame(self):
        views = make_views(circle_centers([0.0]))
        assert count_misalignments(Subsequence(0, 0, 0, (0,)), views).count == 0

    def test_greedy_tail_collects_misalignments(self):
        views = two_cluster_rig()
        scorer = Scorer(views)
        baseline = greedy_order(scorer, ANGLE, 0)
        head, tail = tail_misalignment_split(baseline.frames, views)
        assert (head, tail) == (0, 1)
        assert tail > head
        assert misalignment_profile(baseline.frames, views, bins=4) == [0, 0, 0, 1]

    def test_every_start_baseline_on_two_clusters(self):
        views = two_cluster_rig()
        scorer = Scorer(views)
        summary = all_starts_baseline(scorer, ANGLE, views, bins=4)
        assert summary["starts"] == 36
        assert summary["orders_with_misalignments"] == 36
        # Small-cluster starts leave their cluster at position 6, big-cluster starts at position 30.
        assert summary["head"] >= 6
        assert summary["tail"] >= 30
        assert summary["tail"] > summary["head"]
        assert summary["misaligned_transitions"] == summary["head"] + summary["tail"] == sum(summary["profile_bins"])

        head = tail = 0
        for start in views.frame_ids:
            split = tail_misalignment_split(greedy_order(scorer, ANGLE, start).frames, views)
            head, tail = head + split[0], tail + split[1]
        assert (summary["head"], summary["tail"]) == (head, tail)

    def test_every_start_baseline_on_a_ring_is_clean(self):
        views = make_views(circle_centers(ring_degrees(12)))
        summary = all_starts_baseline(Scorer(views), ANGLE, views)
        assert summary["starts"] == 12
        assert summary["misaligned_transitions"] == 0
        assert summary["profile_bins"] == [0, 0, 0, 0]

    def test_accepted_subsequences_have_no_misalignments(self):
        views = two_cluster_rig()
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=8))
        accepted = [seq for seq in plan.subsequences if len(seq) >= 8]
        assert accepted
        assert sum(count_misalignments(seq, views).count for seq in accepted) == 0

    def test_plan_statistics(self):
        views = two_cluster_rig()
        plan = multi_threshold_plan(Scorer(views), pose_config(min_subseq_len=8))
        stats = plan_statistics(plan, views)
        assert stats["frame_count"] == 36
        assert stats["covered"] == 36
        assert sum(stats["coverage_per_round"].values()) == 36
        assert stats["coverage_per_round"]["3"] == 6
        assert len(stats["misalignments"]) == stats["subsequence_count"]
