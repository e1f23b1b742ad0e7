from __future__ import annotations

import argparse
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING

from tqdm import tqdm

from config import PipelineConfig
from dataset_io import FrameRecord, degrade_frame, degraded_size, write_json_atomic, write_png, write_pose_manifest
from manifests import SPEC_VERSION, frame_file_name

from ._helpers import Workspace, load_config, load_hr_views

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)


description = """
Bicubic-downsample every HR frame by the scale factor into <output>/lr.
Writes an LR transforms.json with the same poses and a degrade.json sidecar.
"""


def degrade(config: PipelineConfig) -> Workspace:
    workspace = Workspace(config.output)
    # Decoding up front rejects mixed frame sizes before any LR file is written.
    views = load_hr_views(config).with_images(config.workers)
    scale = config.scale_factor

    def work(frame: FrameRecord) -> None:
        write_png(workspace.lr_dir / frame_file_name(frame.frame_id), degrade_frame(frame.load_image(), scale))

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        list(tqdm(executor.map(work, views.frames), total=len(views), desc="degrade", disable=None, leave=False))

    first = views.frames[0].load_image()
    hr_w, hr_h = first.width, first.height
    lr_w, lr_h = degraded_size(hr_w, hr_h, scale)
    write_pose_manifest(
        views.resized(1.0 / scale, (lr_w, lr_h)),
        workspace.lr_manifest,
        {frame.frame_id: frame_file_name(frame.frame_id) for frame in views.frames},
        extra={"scale_factor": scale, "w": lr_w, "h": lr_h},
    )
    write_json_atomic(
        workspace.degrade_sidecar,
        {
            "spec_version": SPEC_VERSION,
            "source": Path(os.path.relpath(config.dataset, workspace.lr_dir)).as_posix(),
            "scene": views.scene_name,
            "frame_count": len(views),
            "scale_factor": scale,
            "resampler": "bicubic",
            "size_policy": "ceil",
            "hr_size": [hr_w, hr_h],
            "lr_size": [lr_w, lr_h],
            "alpha": "preserved",
        },
    )
    log.info(
        "Degraded %s frames of %s from %s×%s to %s×%s into %s",
        len(views), views.scene_name, hr_w, hr_h, lr_w, lr_h, workspace.lr_dir,
    )
    return workspace


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    degrade(load_config(args))


def setup(cli: PipelineCli) -> None:
    cli.add_command("degrade", _run, description)
