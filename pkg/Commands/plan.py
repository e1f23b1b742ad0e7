from __future__ import annotations

import argparse
import logging
from typing import TYPE_CHECKING

from config import PipelineConfig, describe
from manifests import PlanFile, UpsampleManifestFile
from ordering import Plan, count_misalignments, multi_threshold_plan

from ._helpers import Workspace, build_scorer, image_size, load_config, load_lr_views

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)


description = """
Order the LR frames into subsequences over every threshold round.
Writes plan.json and the upsample_manifest.json handed to the backend.
"""


def plan(config: PipelineConfig, *, dump_scores: bool = False) -> Plan:
    workspace = Workspace(config.output)
    views = load_lr_views(config, workspace)
    scorer = build_scorer(config, views, workspace)
    if dump_scores:
        scorer.dump_scores_csv(workspace.scores_csv, sorted(config.ordering.measures, key=lambda m: m.value))
        log.info("Wrote pairwise scores to %s", workspace.scores_csv)

    result = multi_threshold_plan(scorer, config.ordering)
    PlanFile.write(
        workspace.plan_path,
        result,
        scene=views.scene_name,
        frame_count=len(views),
        thresholds=config.ordering.thresholds,
        config=describe(config),
    )
    manifest = UpsampleManifestFile.build(
        workspace.manifest_path,
        result,
        workspace.lr_dir,
        config.scale_factor,
        image_size(views.frames[0].source_path),
    )
    UpsampleManifestFile.write(manifest)

    threshold = config.ordering.misalignment_threshold
    misaligned = sum(count_misalignments(seq, views, threshold).count for seq in result.subsequences)
    singletons = sum(1 for seq in result.subsequences if len(seq) == 1)
    log.info(
        "Planned %s subsequences (%s singletons) covering %s/%s frames; %s misaligned transitions",
        len(result.subsequences), singletons, len(result.coverage.covered), len(views), misaligned,
    )
    return result


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    plan(load_config(args), dump_scores=args.dump_scores)


def setup(cli: PipelineCli) -> None:
    command = cli.add_command("plan", _run, description)
    command.add_argument("--dump-scores", action="store_true", help="also write every pairwise score to scores.csv")
