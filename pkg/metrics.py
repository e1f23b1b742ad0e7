from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from dataset_io import RasterImage, bicubic_resample, composite_background, degraded_size

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
# Constants for a [0, 1] dynamic range.
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_MODE = "per-channel mean"

PSNR_TABLE_SENTINEL = 99.0
PSNR_JSON_SENTINEL = "inf"

Metric = Callable[[RasterImage, RasterImage], float]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda_ren: float = 0.6

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda_ren"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _check_pair(a: RasterImage, b: RasterImage) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def l1(a: RasterImage, b: RasterImage) -> float:
    _check_pair(a, b)
    return float(np.mean(np.abs(a.data - b.data)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    weights = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return weights / weights.sum()


def _filter_valid(channel: np.ndarray, window: np.ndarray) -> np.ndarray:
    half = len(window) // 2
    out = ndimage.correlate1d(channel, window, axis=0, mode="constant")
    out = ndimage.correlate1d(out, window, axis=1, mode="constant")
    return out[half:channel.shape[0] - half, half:channel.shape[1] - half]


def ssim(a: RasterImage, b: RasterImage, window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over every fully contained Gaussian window, averaged over channels."""
    _check_pair(a, b)
    if min(a.width, a.height) < window_size:
        raise ValueError(f"SSIM needs images of at least {window_size}×{window_size}")
    window = gaussian_window(window_size, sigma)
    scores = []
    for c in range(a.channels):
        x = a.data[:, :, c]
        y = b.data[:, :, c]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        var_x = _filter_valid(x * x, window) - mu_x * mu_x
        var_y = _filter_valid(y * y, window) - mu_y * mu_y
        cov = _filter_valid(x * y, window) - mu_x * mu_y
        numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        scores.append(float(np.mean(numerator / denominator)))
    return float(np.clip(np.mean(scores), -1.0, 1.0))


def d_ssim(a: RasterImage, b: RasterImage) -> float:
    return 1.0 - ssim(a, b)


def psnr(a: RasterImage, b: RasterImage) -> float:
    """PSNR in dB on the [0, 1] range; identical images give +inf."""
    _check_pair(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_for_table(value: float) -> float:
    return PSNR_TABLE_SENTINEL if math.isinf(value) else value


def psnr_for_json(value: float) -> float | str:
    return PSNR_JSON_SENTINEL if math.isinf(value) else value


def render_loss(
    rendered: RasterImage,
    target: RasterImage,
    weights: LossWeights,
    *,
    l1_fn: Metric = l1,
    dssim_fn: Metric = d_ssim,
) -> float:
    """(1 − λ1)·L1 + λ1·D-SSIM."""
    return (1.0 - weights.lambda1) * l1_fn(rendered, target) + weights.lambda1 * dssim_fn(rendered, target)


def subpixel_loss(
    rendered_hr: RasterImage,
    lr_gt: RasterImage,
    weights: LossWeights,
    scale: int | None = None,
    **metric_fns: Metric,
) -> float:
    """Render loss between the bicubic-downsampled HR render and the LR ground truth."""
    if scale is None:
        if rendered_hr.width % lr_gt.width or rendered_hr.height % lr_gt.height:
            raise ValueError("HR dimensions must be an integer multiple of the LR dimensions")
        scale = rendered_hr.width // lr_gt.width
        if rendered_hr.height // lr_gt.height != scale:
            raise ValueError("HR and LR dimensions imply different scale factors")
    if degraded_size(rendered_hr.width, rendered_hr.height, scale) != (lr_gt.width, lr_gt.height):
        raise ValueError(
            f"{rendered_hr.width}×{rendered_hr.height} does not downsample by {scale} to "
            f"{lr_gt.width}×{lr_gt.height}"
        )
    down = bicubic_resample(rendered_hr, lr_gt.width, lr_gt.height)
    return render_loss(down, lr_gt, weights, **metric_fns)


def total_loss(ren: float, sp: float, weights: LossWeights) -> float:
    """λ_ren·L_ren + (1 − λ_ren)·L_sp."""
    return weights.lambda_ren * ren + (1.0 - weights.lambda_ren) * sp


@dataclass(frozen=True)
class FrameMetrics:
    frame_id: int
    psnr: float
    ssim: float
    render_loss: float
    subpixel_loss: float | None
    total_loss: float | None

    def as_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "psnr": psnr_for_json(self.psnr),
            "ssim": self.ssim,
            "render_loss": self.render_loss,
            "subpixel_loss": self.subpixel_loss,
            "total_loss": self.total_loss,
        }


def _flatten(img: RasterImage, background: Iterable[float]) -> RasterImage:
    return composite_background(img, tuple(background)) if img.channels == 4 else img


def evaluate_pair(
    frame_id: int,
    predicted: RasterImage,
    ground_truth: RasterImage,
    weights: LossWeights,
    *,
    lr: RasterImage | None = None,
    scale: int | None = None,
    background: Iterable[float] = (0.0, 0.0, 0.0),
) -> FrameMetrics:
    """Fidelity metrics and loss components for one frame, after background compositing."""
    background = tuple(background)
    predicted = _flatten(predicted, background)
    ground_truth = _flatten(ground_truth, background)
    ren = render_loss(predicted, ground_truth, weights)
    sp = total = None
    if lr is not None:
        sp = subpixel_loss(predicted, _flatten(lr, background), weights, scale)
        total = total_loss(ren, sp, weights)
    return FrameMetrics(
        frame_id=frame_id,
        psnr=psnr(predicted, ground_truth),
        ssim=ssim(predicted, ground_truth),
        render_loss=ren,
        subpixel_loss=sp,
        total_loss=total,
    )
