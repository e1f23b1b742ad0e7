from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from dataset_io import MultiViewSet, RasterImage, bicubic_resample, composite_background

log = logging.getLogger(__name__)

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
CACHE_FORMAT_VERSION = 1

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1),
    (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1),
    (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
FAST_ARC = 9
FAST_RADIUS = 3

# Learned ORB test pairs (x1, y1, x2, y2) on a 31×31 patch, the table
# OpenCV ships as bit_pattern_31_.
BRIEF_PATTERN = np.array(
    [
        (8, -3, 9, 5), (4, 2, 7, -12), (-11, 9, -8, 2), (7, -12, 12, -13),
        (2, -13, 2, 12), (1, -7, 1, 6), (-2, -10, -2, -4), (-13, -13, -11, -8),
        (-13, -3, -12, -9), (10, 4, 11, 9), (-13, -8, -8, -9), (-11, 7, -9, 12),
        (7, 7, 12, 6), (-4, -5, -3, 0), (-13, 2, -12, -3), (-9, 0, -7, 5),
        (12, -6, 12, -1), (-3, 6, -2, 12), (-6, -13, -4, -8), (11, -13, 12, -8),
        (4, 7, 5, 1), (5, -3, 10, -3), (3, -7, 6, 12), (-8, -7, -6, -2),
        (-2, 11, -1, -10), (-13, 12, -8, 10), (-7, 3, -5, -3), (-4, 2, -3, 7),
        (-10, -12, -6, 11), (5, -12, 6, -7), (5, -6, 7, -1), (1, 0, 4, -5),
        (9, 11, 11, -13), (4, 7, 4, 12), (2, -1, 4, 4), (-4, -12, -2, 7),
        (-8, -5, -7, -10), (4, 11, 9, 12), (0, -8, 1, -13), (-13, -2, -8, 2),
        (-3, -2, -2, 3), (-6, 9, -4, -9), (8, 12, 10, 7), (0, 9, 1, 3),
        (7, -5, 11, -10), (-13, -6, -11, 0), (10, 7, 12, 1), (-6, -3, -6, 12),
        (10, -9, 12, -4), (-13, 8, -8, -12), (-13, 0, -8, -4), (3, 3, 7, 8),
        (5, 7, 10, -7), (-1, 7, 1, -12), (3, -10, 5, 6), (2, -4, 3, -10),
        (-13, 0, -13, 5), (-13, -7, -12, 12), (-13, 3, -11, 8), (-7, 12, -4, 7),
        (6, -10, 12, 8), (-9, -1, -7, -6), (-2, -5, 0, 12), (-12, 5, -7, 5),
        (3, -10, 8, -13), (-7, -7, -4, 5), (-3, -2, -1, -7), (2, 9, 5, -11),
        (-11, -13, -5, -13), (-1, 6, 0, -1), (5, -3, 5, 2), (-4, -13, -4, 12),
        (-9, -6, -9, 6), (-12, -10, -8, -4), (10, 2, 12, -3), (7, 12, 12, 12),
        (-7, -13, -6, 5), (-4, 9, -3, 4), (7, -1, 12, 2), (-7, 6, -5, 1),
        (-13, 11, -12, 5), (-3, 7, -2, -6), (7, -8, 12, -7), (-13, -7, -11, -12),
        (1, -3, 12, 12), (2, -6, 3, 0), (-4, 3, -2, -13), (-1, -13, 1, 9),
        (7, 1, 8, -6), (1, -1, 3, 12), (9, 1, 12, 6), (-1, -9, -1, 3),
        (-13, -13, -10, 5), (7, 7, 10, 12), (12, -5, 12, 9), (6, 3, 7, 11),
        (5, -13, 6, 10), (2, -12, 2, 3), (3, 8, 4, -6), (2, 6, 12, -13),
        (9, -12, 10, 3), (-8, 4, -7, 9), (-11, 12, -4, -6), (1, 12, 2, -8),
        (6, -9, 7, -4), (2, 3, 3, -2), (6, 3, 11, 0), (3, -3, 8, -8),
        (7, 8, 9, 3), (-11, -5, -6, -4), (-10, 11, -5, 10), (-5, -8, -3, 12),
        (-10, 5, -9, 0), (8, -1, 12, -6), (4, -6, 6, -11), (-10, 12, -8, 7),
        (4, -2, 6, 7), (-2, 0, -2, 12), (-5, -8, -5, 2), (7, -6, 10, 12),
        (-9, -13, -8, -8), (-5, -13, -5, -2), (8, -8, 9, -13), (-9, -11, -9, 0),
        (1, -8, 1, -2), (7, -4, 9, 1), (-2, 1, -1, -4), (11, -6, 12, -11),
        (-12, -9, -6, 4), (3, 7, 7, 12), (5, 5, 10, 8), (0, -4, 2, 8),
        (-9, 12, -5, -13), (0, 7, 2, 12), (-1, 2, 1, 7), (5, 11, 7, -9),
        (3, 5, 6, -8), (-13, -4, -8, 9), (-5, 9, -3, -3), (-4, -7, -3, -12),
        (6, 5, 8, 0), (-7, 6, -6, 12), (-13, 6, -5, -2), (1, -10, 3, 10),
        (4, 1, 8, -4), (-2, -2, 2, -13), (2, -12, 12, 12), (-2, -13, 0, -6),
        (4, 1, 9, 3), (-6, -10, -3, -5), (-3, -13, -1, 1), (7, 5, 12, -11),
        (4, -2, 5, -7), (-13, 9, -9, -5), (7, 1, 8, 6), (7, -8, 7, 6),
        (-7, -4, -7, 1), (-8, 11, -7, -8), (-13, 6, -12, -8), (2, 4, 3, 9),
        (10, -5, 12, 3), (-6, -5, -6, 7), (8, -3, 9, -8), (2, -12, 2, 8),
        (-11, -2, -10, 3), (-12, -13, -7, -9), (-11, 0, -10, -5), (5, -3, 11, 8),
        (-2, -13, -1, 12), (-1, -8, 0, 9), (-13, -11, -12, -5), (-10, -2, -10, 11),
        (-3, 9, -2, -13), (2, -3, 3, 2), (-9, -13, -4, 0), (-4, 6, -3, -10),
        (-4, 12, -2, -7), (-6, -11, -4, 9), (6, -3, 6, 11), (-13, 11, -5, 5),
        (11, 11, 12, 6), (7, -5, 12, -2), (-1, 12, 0, 7), (-4, -8, -3, -2),
        (-7, 1, -6, 7), (-13, -12, -8, -13), (-7, -2, -6, -8), (-8, 5, -6, -9),
        (-5, -1, -4, 5), (-13, 7, -8, 10), (1, 5, 5, -13), (1, 0, 10, -13),
        (9, 12, 10, -1), (5, -8, 10, -9), (-1, 11, 1, -13), (-9, -3, -6, 2),
        (-1, -10, 1, 12), (-13, 1, -8, -10), (8, -11, 10, -6), (2, -13, 3, -6),
        (7, -13, 12, -9), (-10, -10, -5, -7), (-10, -8, -8, -13), (4, -6, 8, 5),
        (3, 12, 8, -13), (-4, 2, -3, -3), (5, -13, 10, -12), (4, -13, 5, -1),
        (-9, 9, -4, 3), (0, 3, 3, -9), (-12, 1, -6, 1), (3, 2, 4, -8),
        (-10, -10, -10, 9), (8, -13, 12, 12), (-8, -12, -6, -5), (2, 2, 3, 7),
        (10, 6, 11, -8), (6, 8, 8, -12), (-7, 10, -6, 5), (-3, -9, -3, 9),
        (-1, -13, -1, 5), (-3, -7, -3, 4), (-8, -2, -8, 3), (4, 2, 12, 12),
        (2, -5, 3, 11), (6, -9, 11, -13), (3, -1, 7, 12), (11, -1, 12, 4),
        (-3, 0, -3, 6), (4, -11, 4, 12), (2, -4, 2, 1), (-10, -6, -8, 1),
        (-13, 7, -11, 1), (-13, 12, -11, -13), (6, 0, 11, -13), (0, -1, 1, 4),
        (-13, 3, -9, -2), (-9, 8, -6, -3), (-13, -6, -8, -2), (5, -9, 8, 10),
        (2, 7, 3, -9), (-1, -6, -1, -1), (9, 5, 11, -2), (11, -3, 12, -8),
        (3, 0, 3, 5), (-1, 4, 0, 10), (3, -6, 4, 5), (-13, 0, -10, 5),
        (5, 8, 12, 11), (8, 9, 9, -6), (7, -4, 8, -12), (-10, 4, -10, 9),
        (7, 3, 12, 4), (9, -7, 10, -2), (7, 0, 12, -2), (-1, -6, 0, -11),
    ],
    dtype=np.int8,
)
BRIEF_PATTERN.setflags(write=False)
# Farthest a pattern point reaches from the keypoint under any rotation.
PATTERN_RADIUS = 19


@dataclass(frozen=True)
class OrbConfig:
    max_features: int = 500
    fast_threshold: float = 0.08
    n_levels: int = 8
    scale_factor: float = 1.2
    patch_radius: int = 15
    edge_threshold: int = 20
    blur_sigma: float = 2.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.max_features < 1:
            raise ValueError("max_features must be at least 1")
        if not 0.0 < self.fast_threshold < 1.0:
            raise ValueError("fast_threshold must lie in (0, 1)")
        if self.n_levels < 1 or self.scale_factor <= 1.0:
            raise ValueError("pyramid needs n_levels >= 1 and scale_factor > 1")
        if self.edge_threshold <= max(self.patch_radius, PATTERN_RADIUS):
            raise ValueError("edge_threshold must exceed the patch radius")

    def digest(self) -> str:
        payload = json.dumps({**asdict(self), "pattern": "bit_pattern_31"}, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    angle: float = 0.0
    level: int = 0


@dataclass(frozen=True)
class DescriptorSet:
    frame_id: int
    keypoints: tuple[Keypoint, ...] = ()
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8))

    def __post_init__(self) -> None:
        if self.descriptors.ndim != 2 or self.descriptors.shape[1] != DESCRIPTOR_BYTES:
            raise ValueError(f"descriptors must be n×{DESCRIPTOR_BYTES} packed bytes")
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must be parallel")

    def __len__(self) -> int:
        return len(self.keypoints)


def to_grayscale(img: RasterImage) -> RasterImage:
    if img.channels == 1:
        return img
    if img.channels not in (3, 4):
        raise ValueError(f"cannot convert {img.channels}-channel image to grayscale")
    return RasterImage(np.clip(img.data[:, :, :3] @ LUMA_WEIGHTS, 0.0, 1.0))


def _fast_response(gray: np.ndarray, threshold: float) -> np.ndarray:
    height, width = gray.shape
    r = FAST_RADIUS
    center = gray[r:height - r, r:width - r]
    ring = np.stack(
        [gray[r + dy:height - r + dy, r + dx:width - r + dx] for dx, dy in FAST_CIRCLE]
    )
    brighter = ring > center + threshold
    darker = ring < center - threshold

    def has_arc(mask: np.ndarray) -> np.ndarray:
        wrapped = np.concatenate([mask, mask[: FAST_ARC - 1]]).astype(np.int16)
        sums = np.concatenate([np.zeros((1,) + mask.shape[1:], np.int16), np.cumsum(wrapped, axis=0)])
        windows = sums[FAST_ARC:FAST_ARC + len(FAST_CIRCLE)] - sums[: len(FAST_CIRCLE)]
        return np.any(windows == FAST_ARC, axis=0)

    corner = has_arc(brighter) | has_arc(darker)
    bright_score = np.where(brighter, ring - center - threshold, 0.0).sum(axis=0)
    dark_score = np.where(darker, center - ring - threshold, 0.0).sum(axis=0)

    response = np.zeros_like(gray)
    response[r:height - r, r:width - r] = np.where(corner, np.maximum(bright_score, dark_score), 0.0)
    return response


def detect_fast(img: RasterImage, intensity_threshold: float, border: int = FAST_RADIUS) -> list[Keypoint]:
    """FAST-9 segment test with 3×3 non-maximum suppression on the SAD score."""
    if img.channels != 1:
        raise ValueError("detect_fast expects a grayscale image")
    if img.width < 7 or img.height < 7:
        raise ValueError("detect_fast needs an image of at least 7×7")
    gray = img.data[:, :, 0]
    response = _fast_response(gray, intensity_threshold)
    peaks = ndimage.maximum_filter(response, size=3, mode="constant", cval=0.0)
    keep = (response > 0.0) & (response == peaks)
    border = max(border, FAST_RADIUS)
    keep[:border] = False
    keep[-border:] = False
    keep[:, :border] = False
    keep[:, -border:] = False
    ys, xs = np.nonzero(keep)
    return [Keypoint(x=float(x), y=float(y), score=float(response[y, x])) for y, x in zip(ys, xs)]


def orientation(img: RasterImage, kp: Keypoint, radius: int = 15) -> float:
    """Intensity-centroid angle in [0, 2π); a zero moment vector yields 0."""
    gray = img.data[:, :, 0]
    cx, cy = int(round(kp.x)), int(round(kp.y))
    offsets = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(offsets, offsets)
    inside = dx * dx + dy * dy <= radius * radius
    xs = np.clip(cx + dx, 0, gray.shape[1] - 1)
    ys = np.clip(cy + dy, 0, gray.shape[0] - 1)
    patch = np.where(inside, gray[ys, xs], 0.0)
    m10 = float(np.sum(dx * patch))
    m01 = float(np.sum(dy * patch))
    if abs(m10) < 1e-12 and abs(m01) < 1e-12:
        return 0.0
    angle = math.atan2(m01, m10) % (2.0 * math.pi)
    return 0.0 if angle >= 2.0 * math.pi else angle


def steered_brief(img: RasterImage, kp: Keypoint, pattern: np.ndarray = BRIEF_PATTERN) -> np.ndarray:
    """Rotation-steered BRIEF: bit b is 1 iff I(p_b) < I(q_b); ties give 0."""
    gray = img.data[:, :, 0]
    cos_a, sin_a = math.cos(kp.angle), math.sin(kp.angle)
    pts = pattern.astype(np.float64)

    def sample(px: np.ndarray, py: np.ndarray) -> np.ndarray:
        xs = np.rint(kp.x + cos_a * px - sin_a * py).astype(np.int64)
        ys = np.rint(kp.y + sin_a * px + cos_a * py).astype(np.int64)
        # Keypoints closer to the border than the pattern radius sample the edge.
        xs = np.clip(xs, 0, gray.shape[1] - 1)
        ys = np.clip(ys, 0, gray.shape[0] - 1)
        return gray[ys, xs]

    first = sample(pts[:, 0], pts[:, 1])
    second = sample(pts[:, 2], pts[:, 3])
    return np.packbits(first < second)


def _pyramid(gray: RasterImage, config: OrbConfig) -> list[tuple[float, RasterImage]]:
    levels = [(1.0, gray)]
    minimum = 2 * config.edge_threshold + 1
    for level in range(1, config.n_levels):
        scale = config.scale_factor ** level
        width = int(round(gray.width / scale))
        height = int(round(gray.height / scale))
        if width < minimum or height < minimum:
            break
        levels.append((scale, bicubic_resample(gray, width, height)))
    return levels


def extract_orb(img: RasterImage, config: OrbConfig = OrbConfig(), frame_id: int = 0) -> DescriptorSet:
    if img.channels == 4:
        img = composite_background(img, config.background)
    gray = to_grayscale(img)
    if gray.width < 2 * config.edge_threshold + 1 or gray.height < 2 * config.edge_threshold + 1:
        log.debug("frame %s is smaller than the ORB patch; no features", frame_id)
        return DescriptorSet(frame_id=frame_id)

    candidates: list[tuple[float, int, float, float]] = []
    levels = _pyramid(gray, config)
    for level, (_, level_img) in enumerate(levels):
        for kp in detect_fast(level_img, config.fast_threshold, border=config.edge_threshold):
            candidates.append((kp.score, level, kp.y, kp.x))

    # Strongest first; ties resolve by level, then raster order.
    candidates.sort(key=lambda item: (-item[0], item[1], item[2], item[3]))
    candidates = candidates[: config.max_features]

    smoothed = [
        RasterImage(np.clip(ndimage.gaussian_filter(level_img.data[:, :, 0], config.blur_sigma, mode="nearest"), 0.0, 1.0))
        for _, level_img in levels
    ]
    keypoints: list[Keypoint] = []
    descriptors: list[np.ndarray] = []
    for score, level, y, x in candidates:
        scale, level_img = levels[level]
        local = Keypoint(x=x, y=y, score=score, level=level)
        angle = orientation(level_img, local, config.patch_radius)
        local = Keypoint(x=x, y=y, score=score, angle=angle, level=level)
        descriptors.append(steered_brief(smoothed[level], local))
        keypoints.append(Keypoint(x=x * scale, y=y * scale, score=score, angle=angle, level=level))

    packed = np.stack(descriptors) if descriptors else np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    log.debug("frame %s: %s ORB features over %s levels", frame_id, len(keypoints), len(levels))
    return DescriptorSet(frame_id=frame_id, keypoints=tuple(keypoints), descriptors=packed)


class DescriptorCache:
    """Per-frame ``.npz`` blobs keyed by frame id, config digest and image digest."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)

    @staticmethod
    def image_digest(img: RasterImage) -> str:
        return hashlib.sha256(np.ascontiguousarray(img.data).tobytes()).hexdigest()[:16]

    def _path(self, frame_id: int, config: OrbConfig) -> Path:
        return self.directory / f"frame_{frame_id:05}_{config.digest()}.npz"

    def get(self, frame_id: int, config: OrbConfig, img: RasterImage) -> DescriptorSet | None:
        path = self._path(frame_id, config)
        if not path.is_file():
            return None
        try:
            with np.load(path) as blob:
                if int(blob["version"]) != CACHE_FORMAT_VERSION or str(blob["image_digest"]) != self.image_digest(img):
                    log.debug("stale descriptor cache entry %s", path.name)
                    return None
                table = blob["keypoints"]
                descriptors = blob["descriptors"].astype(np.uint8)
        except (OSError, KeyError, ValueError) as exc:
            log.warning("ignoring unreadable descriptor cache entry %s: %s", path, exc)
            return None
        keypoints = tuple(
            Keypoint(x=float(x), y=float(y), score=float(s), angle=float(a), level=int(lv))
            for x, y, s, a, lv in table
        )
        return DescriptorSet(frame_id=frame_id, keypoints=keypoints, descriptors=descriptors)

    def put(self, features: DescriptorSet, config: OrbConfig, img: RasterImage) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        table = np.array(
            [(kp.x, kp.y, kp.score, kp.angle, kp.level) for kp in features.keypoints], dtype=np.float64
        ).reshape(-1, 5)
        path = self._path(features.frame_id, config)
        temp = path.with_suffix(".tmp.npz")
        np.savez(
            temp,
            version=CACHE_FORMAT_VERSION,
            image_digest=self.image_digest(img),
            keypoints=table,
            descriptors=features.descriptors,
        )
        temp.replace(path)


def extract_all(
    views: MultiViewSet,
    config: OrbConfig = OrbConfig(),
    cache: DescriptorCache | None = None,
    workers: int | None = None,
) -> dict[int, DescriptorSet]:
    """Extract descriptors for every frame concurrently, in frame order."""

    def work(frame) -> DescriptorSet:
        img = frame.load_image()
        if cache is not None:
            cached = cache.get(frame.frame_id, config, img)
            if cached is not None:
                return cached
        features = extract_orb(img, config, frame_id=frame.frame_id)
        if cache is not None:
            cache.put(features, config, img)
        return features

    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(
            tqdm(executor.map(work, views.frames), total=len(views), desc="ORB", disable=None, leave=False)
        )
    log.info("Extracted ORB features for %s frames", len(results))
    return {features.frame_id: features for features in results}


def descriptor_bits(features: DescriptorSet | Iterable[np.ndarray]) -> np.ndarray:
    packed = features.descriptors if isinstance(features, DescriptorSet) else np.asarray(list(features), np.uint8)
    return np.unpackbits(packed.reshape(-1, DESCRIPTOR_BYTES), axis=1)

