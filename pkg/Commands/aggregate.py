from __future__ import annotations

import argparse
import logging
from dataclasses import asdict
from pathlib import Path
from typing import TYPE_CHECKING

from tqdm import tqdm

from config import PipelineConfig
from dataset_io import write_json_atomic, write_pose_manifest
from manifests import SPEC_VERSION, PlanFile, UpsampleManifestFile, frame_file_name
from ordering import AggregateError, aggregate
from upsampler import verify_outputs

from ._helpers import Workspace, copy_file_atomic, load_config, load_lr_views

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)


description = """
Keep one upsampled image per frame, taken from its earliest subsequence.
Writes <output>/hr with frame_XXXXX.png files, transforms.json and provenance.json.
"""


def aggregate_outputs(config: PipelineConfig) -> dict[int, Path]:
    workspace = Workspace(config.output)
    views = load_lr_views(config, workspace)
    plan, _ = PlanFile.load(workspace.plan_path)
    manifest = UpsampleManifestFile.load(workspace.manifest_path)
    verify_outputs(manifest, workspace.upsampled_dir)

    upsampled = {
        entry.subseq_id: [
            manifest.expected_output(workspace.upsampled_dir, entry.subseq_id, frame_id) for frame_id, _ in entry.frames
        ]
        for entry in manifest.subsequences
    }
    selected = aggregate(upsampled, plan)
    if sorted(selected) != sorted(views.frame_ids):
        raise AggregateError(f"aggregated {len(selected)} frames for a dataset of {len(views)}")

    outputs: dict[int, Path] = {}
    for frame_id in tqdm(sorted(selected), desc="aggregate", disable=None, leave=False):
        target = workspace.hr_dir / frame_file_name(frame_id)
        copy_file_atomic(selected[frame_id], target)
        outputs[frame_id] = target

    width, height = manifest.hr_size
    write_pose_manifest(
        views.resized(manifest.scale_factor, (width, height)),
        workspace.hr_manifest,
        {frame_id: frame_file_name(frame_id) for frame_id in views.frame_ids},
        extra={"w": width, "h": height, "loss_weights": asdict(config.loss_weights)},
    )
    write_json_atomic(
        workspace.provenance_path,
        {
            "spec_version": SPEC_VERSION,
            "scene": views.scene_name,
            "frames": [
                {"frame_id": frame_id, **plan.coverage.provenance[frame_id]._asdict()}
                for frame_id in sorted(outputs)
            ],
        },
    )
    log.info("Aggregated %s HR frames (%s×%s) into %s", len(outputs), width, height, workspace.hr_dir)
    return outputs


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    aggregate_outputs(load_config(args))


def setup(cli: PipelineCli) -> None:
    cli.add_command("aggregate", _run, description)
