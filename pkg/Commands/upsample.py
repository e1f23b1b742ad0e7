from __future__ import annotations

import argparse
import logging
import shutil
from typing import TYPE_CHECKING

from config import PipelineConfig
from manifests import UpsampleManifest, UpsampleManifestFile
from upsampler import run_upsampler

from ._helpers import Workspace, add_upsampler_arguments, load_config

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)


description = """
Run the configured upsampler over upsample_manifest.json.
Outputs land in <output>/upsampled/subseq_XXXXX/ and are checked before returning.
"""


def upsample(config: PipelineConfig, timeout: float | None = None) -> UpsampleManifest:
    workspace = Workspace(config.output)
    manifest = UpsampleManifestFile.load(workspace.manifest_path)
    if workspace.upsampled_dir.exists():
        log.info("Clearing previous outputs in %s", workspace.upsampled_dir)
        shutil.rmtree(workspace.upsampled_dir)
    workspace.upsampled_dir.mkdir(parents=True)
    run_upsampler(config.upsampler, manifest, workspace.upsampled_dir, timeout=timeout, workers=config.workers)
    log.info(
        "Upsampled %s subsequences with the %s backend",
        len(manifest.subsequences), config.upsampler.kind.value,
    )
    return manifest


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    upsample(load_config(args), cli.upsample_timeout)


def setup(cli: PipelineCli) -> None:
    add_upsampler_arguments(cli.add_command("upsample", _run, description))
