from __future__ import annotations

import argparse
import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np
from tqdm import tqdm

from config import PipelineConfig
from dataset_io import DatasetError, MultiViewSet, RasterImage, load_pose_manifest, write_json_atomic, write_text_atomic
from manifests import SPEC_VERSION
from metrics import SSIM_MODE, SSIM_WINDOW, FrameMetrics, evaluate_pair, psnr_for_json, psnr_for_table

from ._helpers import Workspace, load_config

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)

CSV_FIELDS = ("frame_id", "psnr", "ssim", "render_loss", "subpixel_loss", "total_loss")


description = """
Compare the aggregated HR frames against a ground-truth HR dataset.
Writes per-frame and mean PSNR, SSIM and loss components to metrics.json and metrics.csv.
"""


def _crop_to(predicted: RasterImage, reference: RasterImage, scale: int, frame_id: int) -> RasterImage:
    """Drop the padding the ceil size policy adds to non-divisible frames."""
    extra_w = predicted.width - reference.width
    extra_h = predicted.height - reference.height
    if not (0 <= extra_w < scale and 0 <= extra_h < scale):
        raise DatasetError(
            f"frame {frame_id}: prediction is {predicted.width}×{predicted.height}, "
            f"reference is {reference.width}×{reference.height}"
        )
    if extra_w or extra_h:
        return RasterImage(predicted.data[: reference.height, : reference.width])
    return predicted


def _mean(values: Iterable[float | None]) -> float | None:
    present = [value for value in values if value is not None]
    return float(np.mean(present)) if present else None


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def evaluate(
    config: PipelineConfig,
    predicted: MultiViewSet,
    reference: MultiViewSet,
    lr: MultiViewSet | None = None,
) -> list[FrameMetrics]:
    if sorted(predicted.frame_ids) != sorted(reference.frame_ids):
        raise DatasetError(
            f"predicted set has {len(predicted)} frames, reference has {len(reference)}; frame ids must match"
        )
    scale = config.scale_factor

    def work(frame_id: int) -> FrameMetrics:
        truth = reference.frame(frame_id).load_image()
        guess = _crop_to(predicted.frame(frame_id).load_image(), truth, scale, frame_id)
        low = None
        if lr is not None:
            low = lr.frame(frame_id).load_image()
            if min(low.width, low.height) < SSIM_WINDOW:
                log.debug("frame %s: LR frame below the SSIM window, skipping sub-pixel loss", frame_id)
                low = None
        if guess.channels != truth.channels and 1 in (guess.channels, truth.channels):
            raise DatasetError(f"frame {frame_id}: cannot compare {guess.channels}- and {truth.channels}-channel images")
        try:
            return evaluate_pair(
                frame_id, guess, truth, config.loss_weights, lr=low, scale=scale, background=config.background
            )
        except ValueError as exc:
            raise DatasetError(f"frame {frame_id}: {exc}") from exc

    ids = sorted(reference.frame_ids)
    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        return list(tqdm(executor.map(work, ids), total=len(ids), desc="eval", disable=None, leave=False))


def write_metrics(workspace: Workspace, config: PipelineConfig, scene: str, results: list[FrameMetrics]) -> None:
    mean = {
        "psnr": _mean(result.psnr for result in results),
        "ssim": _mean(result.ssim for result in results),
        "render_loss": _mean(result.render_loss for result in results),
        "subpixel_loss": _mean(result.subpixel_loss for result in results),
        "total_loss": _mean(result.total_loss for result in results),
    }
    write_json_atomic(
        workspace.metrics_json,
        {
            "spec_version": SPEC_VERSION,
            "scene": scene,
            "ssim_mode": SSIM_MODE,
            "background": list(config.background),
            "loss_weights": asdict(config.loss_weights),
            "mean": {**mean, "psnr": psnr_for_json(mean["psnr"])},
            "frames": [result.as_json() for result in results],
        },
    )

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for result in results:
        writer.writerow([
            result.frame_id,
            _cell(psnr_for_table(result.psnr)),
            _cell(result.ssim),
            _cell(result.render_loss),
            _cell(result.subpixel_loss),
            _cell(result.total_loss),
        ])
    writer.writerow([
        "mean",
        _cell(psnr_for_table(mean["psnr"])),
        _cell(mean["ssim"]),
        _cell(mean["render_loss"]),
        _cell(mean["subpixel_loss"]),
        _cell(mean["total_loss"]),
    ])
    write_text_atomic(workspace.metrics_csv, buffer.getvalue())


def evaluate_workspace(
    config: PipelineConfig,
    *,
    predicted_path: Path | None = None,
    reference_path: Path | None = None,
) -> list[FrameMetrics]:
    workspace = Workspace(config.output)
    predicted = load_pose_manifest(predicted_path or workspace.hr_manifest)
    reference = load_pose_manifest(reference_path or config.dataset)
    lr = load_pose_manifest(workspace.lr_manifest) if workspace.lr_manifest.is_file() else None
    if lr is not None and sorted(lr.frame_ids) != sorted(reference.frame_ids):
        log.warning("LR set at %s does not match the reference frames; skipping sub-pixel loss", workspace.lr_manifest)
        lr = None

    results = evaluate(config, predicted, reference, lr)
    write_metrics(workspace, config, reference.scene_name, results)
    mean_psnr = _mean(result.psnr for result in results)
    log.info(
        "Evaluated %s frames: mean PSNR %s dB, mean SSIM %.4f",
        len(results),
        "inf" if mean_psnr is not None and math.isinf(mean_psnr) else f"{mean_psnr:.2f}",
        _mean(result.ssim for result in results),
    )
    return results


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    root = Path(args.root)
    evaluate_workspace(
        load_config(args),
        predicted_path=None if args.predicted is None else root / args.predicted,
        reference_path=None if args.reference is None else root / args.reference,
    )


def setup(cli: PipelineCli) -> None:
    command = cli.add_command("eval", _run, description)
    command.add_argument("--predicted", help="pose manifest of the frames to score (default: <output>/hr)")
    command.add_argument("--reference", help="ground-truth pose manifest (default: the configured dataset)")
