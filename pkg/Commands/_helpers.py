from __future__ import annotations

import argparse
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from PIL import Image

from config import PipelineConfig, load_pipeline_config
from dataset_io import DatasetError, MultiViewSet, load_pose_manifest
from orb import DescriptorCache, extract_all
from similarity import Scorer


@dataclass(frozen=True)
class Workspace:
    """Paths below the configured output directory."""

    output: Path

    @property
    def lr_dir(self) -> Path:
        return self.output / "lr"

    @property
    def lr_manifest(self) -> Path:
        return self.lr_dir / "transforms.json"

    @property
    def degrade_sidecar(self) -> Path:
        return self.lr_dir / "degrade.json"

    @property
    def features_dir(self) -> Path:
        return self.output / "features"

    @property
    def plan_path(self) -> Path:
        return self.output / "plan.json"

    @property
    def manifest_path(self) -> Path:
        return self.output / "upsample_manifest.json"

    @property
    def scores_csv(self) -> Path:
        return self.output / "scores.csv"

    @property
    def upsampled_dir(self) -> Path:
        return self.output / "upsampled"

    @property
    def hr_dir(self) -> Path:
        return self.output / "hr"

    @property
    def hr_manifest(self) -> Path:
        return self.hr_dir / "transforms.json"

    @property
    def provenance_path(self) -> Path:
        return self.hr_dir / "provenance.json"

    @property
    def metrics_json(self) -> Path:
        return self.output / "metrics.json"

    @property
    def metrics_csv(self) -> Path:
        return self.output / "metrics.csv"

    @property
    def report_path(self) -> Path:
        return self.output / "report.json"


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for key in ("dataset", "output", "scale_factor", "workers", "scene_origin"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = list(value) if key == "scene_origin" else value
    command = getattr(args, "upsampler_command", None)
    if command is not None:
        overrides.setdefault("upsampler", {}).update({"kind": "external", "command": command})
    if getattr(args, "per_subsequence", False):
        overrides.setdefault("upsampler", {})["per_subsequence"] = True
    return overrides


def load_config(args: argparse.Namespace) -> PipelineConfig:
    root = Path(args.root)
    path = None if args.config is None else root / args.config
    config = load_pipeline_config(path, preset=args.preset, overrides=_overrides(args))
    return config.resolve(root)


def add_upsampler_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--upsampler-command",
        help="external backend command template with {manifest} and {outdir} placeholders",
    )
    parser.add_argument(
        "--per-subsequence",
        action="store_true",
        help="invoke the external backend once per subsequence; {subseq_id} is substituted too",
    )


def _apply_origin(views: MultiViewSet, config: PipelineConfig) -> MultiViewSet:
    return views if config.scene_origin is None else views.with_origin(config.scene_origin)


def load_hr_views(config: PipelineConfig) -> MultiViewSet:
    return _apply_origin(load_pose_manifest(config.dataset, scale_factor=config.scale_factor), config)


def load_lr_views(config: PipelineConfig, workspace: Workspace) -> MultiViewSet:
    if not workspace.lr_manifest.is_file():
        raise DatasetError(f"no LR dataset at {workspace.lr_manifest}; run degrade first")
    return _apply_origin(load_pose_manifest(workspace.lr_manifest, scale_factor=config.scale_factor), config)


def image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as handle:
            return handle.size
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def build_scorer(config: PipelineConfig, views: MultiViewSet, workspace: Workspace) -> Scorer:
    """Scorer over ``views``, extracting (or reusing cached) ORB features when a measure needs them."""
    features = None
    if any(measure.needs_features for measure in config.ordering.measures):
        cache = DescriptorCache(workspace.features_dir)
        features = extract_all(views, config.orb, cache, workers=config.workers)
    return Scorer(views, features, min_matches=config.min_matches, workers=config.workers)


def copy_file_atomic(source: Path, target: Path) -> None:
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    temp_path = Path(temp_name)
    try:
        with os.fdopen(fd, "wb") as temp, source.open("rb") as handle:
            shutil.copyfileobj(handle, temp)
        temp_path.replace(target)
    except BaseException:
        temp_path.unlink(missing_ok=True)
        raise
