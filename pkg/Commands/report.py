from __future__ import annotations

import argparse
import logging
import math
from typing import TYPE_CHECKING, Any

from config import PipelineConfig
from dataset_io import DatasetError, write_json_atomic
from manifests import SPEC_VERSION, PlanFile
from ordering import (
    all_starts_baseline,
    count_misalignments,
    greedy_order,
    misalignment_profile,
    plan_statistics,
    tail_misalignment_split,
)

from ._helpers import Workspace, build_scorer, load_config, load_lr_views

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)

PROFILE_BINS = 4
TAIL_FRACTION = 0.25


description = """
Summarize plan.json: subsequence lengths, coverage per round and misalignments.
Compares against greedy orders over all frames, from one start and from every start; writes report.json.
"""


def build_report(config: PipelineConfig) -> dict[str, Any]:
    workspace = Workspace(config.output)
    views = load_lr_views(config, workspace)
    plan, meta = PlanFile.load(workspace.plan_path)
    threshold = config.ordering.misalignment_threshold

    scorer = build_scorer(config, views, workspace)
    start = config.ordering.start_frame if config.ordering.start_frame is not None else scorer.ids[0]
    if start not in scorer.ids:
        raise DatasetError(f"start_frame {start} is not one of the {len(scorer.ids)} frames")
    baseline = greedy_order(scorer, config.ordering.select_measure, start)
    head, tail = tail_misalignment_split(baseline.frames, views, threshold, TAIL_FRACTION)

    statistics = plan_statistics(plan, views, threshold)
    return {
        "spec_version": SPEC_VERSION,
        "scene": views.scene_name,
        "misalignment_threshold_deg": round(math.degrees(threshold), 9),
        "rounds": meta.get("rounds", []),
        "plan": {
            **statistics,
            "misaligned_transitions": sum(entry["count"] for entry in statistics["misalignments"]),
        },
        "greedy_baseline": {
            "select_measure": config.ordering.select_measure.value,
            "start_frame": start,
            "misaligned_transitions": count_misalignments(baseline, views, threshold).count,
            "profile_bins": misalignment_profile(baseline.frames, views, threshold, PROFILE_BINS),
            "tail_fraction": TAIL_FRACTION,
            "head": head,
            "tail": tail,
        },
        "all_starts_baseline": {
            "select_measure": config.ordering.select_measure.value,
            **all_starts_baseline(
                scorer, config.ordering.select_measure, views, threshold, TAIL_FRACTION, PROFILE_BINS
            ),
        },
    }


def report(config: PipelineConfig) -> dict[str, Any]:
    workspace = Workspace(config.output)
    contents = build_report(config)
    write_json_atomic(workspace.report_path, contents)
    log.info(
        "Plan has %s misaligned transitions; a single greedy order has %s (%s in the last %s%%)",
        contents["plan"]["misaligned_transitions"],
        contents["greedy_baseline"]["misaligned_transitions"],
        contents["greedy_baseline"]["tail"],
        int(TAIL_FRACTION * 100),
    )
    log.info(
        "Greedy orders from all %s starts: %s misaligned transitions, %s in the last %s%%",
        contents["all_starts_baseline"]["starts"],
        contents["all_starts_baseline"]["misaligned_transitions"],
        contents["all_starts_baseline"]["tail"],
        int(TAIL_FRACTION * 100),
    )
    return contents


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    report(load_config(args))


def setup(cli: PipelineCli) -> None:
    cli.add_command("report", _run, description)
