from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

BICUBIC_A = -0.5
ORTHONORMAL_TOLERANCE = 1e-6
BOTTOM_ROW_TOLERANCE = 1e-6

# Manifest keys measured in pixels; they follow the image through a resize.
PIXEL_INTRINSICS = ("fl_x", "fl_y", "cx", "cy")
PIXEL_SIZE_KEYS = ("w", "h")
MANIFEST_KEYS = frozenset({"frames", "camera_angle_x", "scene_name", "scene_origin", "scale_factor"})
FRAME_KEYS = frozenset({"file_path", "transform_matrix"})


class DatasetError(ValueError):
    """Raised when a pose manifest or one of its frames cannot be used."""


@dataclass(frozen=True)
class RasterImage:
    """Row-major H×W×C float image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3, 4):
            raise ValueError(f"expected H×W×{{1,3,4}} data, got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CameraPose:
    transform: np.ndarray
    center: np.ndarray
    view_axis: np.ndarray


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    source_path: Path | None
    pose: CameraPose
    image: RasterImage | None = field(default=None, repr=False, compare=False)
    extra: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def load_image(self) -> RasterImage:
        if self.image is not None:
            return self.image
        if self.source_path is None:
            raise DatasetError(f"frame {self.frame_id} has neither pixels nor a source path")
        return read_png(self.source_path)


@dataclass(frozen=True)
class MultiViewSet:
    frames: tuple[FrameRecord, ...]
    scene_name: str
    scale_factor: int = 4
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    camera_angle_x: float | None = None
    manifest_path: Path | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.frames:
            raise DatasetError("empty dataset")
        ids = [frame.frame_id for frame in self.frames]
        if len(set(ids)) != len(ids):
            raise DatasetError("frame ids must be unique within a dataset")
        if self.scale_factor < 1:
            raise DatasetError(f"scale factor must be positive, got {self.scale_factor}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_ids(self) -> list[int]:
        return [frame.frame_id for frame in self.frames]

    def frame(self, frame_id: int) -> FrameRecord:
        for record in self.frames:
            if record.frame_id == frame_id:
                return record
        raise KeyError(frame_id)

    def with_origin(self, origin: Sequence[float]) -> MultiViewSet:
        return replace(self, origin=tuple(float(v) for v in origin))

    def with_images(self, workers: int | None = None) -> MultiViewSet:
        """Return a copy with every frame decoded; frames decode concurrently."""
        with ThreadPoolExecutor(max_workers=workers) as executor:
            images = list(executor.map(FrameRecord.load_image, self.frames))
        shapes = {image.data.shape[:2] for image in images}
        if len(shapes) > 1:
            raise DatasetError(f"{self.scene_name}: frames have differing dimensions {sorted(shapes)}")
        frames = tuple(replace(frame, image=image) for frame, image in zip(self.frames, images))
        return replace(self, frames=frames)

    def resized(self, factor: float, size: tuple[int, int]) -> MultiViewSet:
        """Copy whose pixel intrinsics describe images scaled by ``factor`` to ``size`` (w, h).

        Decoded pixels are dropped; frames point at their source paths again.
        """
        frames = tuple(
            replace(frame, image=None, extra=rescale_intrinsics(frame.extra, factor, size)) for frame in self.frames
        )
        return replace(self, frames=frames, extra=rescale_intrinsics(self.extra, factor, size))


def rescale_intrinsics(values: Mapping[str, Any], factor: float, size: tuple[int, int]) -> dict[str, Any]:
    """Scale focal lengths and principal point by ``factor``; ``w``/``h`` become ``size``.

    Keys that are absent stay absent. Everything else is copied unchanged.
    """
    rescaled = dict(values)
    for key in PIXEL_INTRINSICS:
        if isinstance(rescaled.get(key), (int, float)):
            rescaled[key] = float(rescaled[key]) * factor
    for key, value in zip(PIXEL_SIZE_KEYS, size):
        if key in rescaled:
            rescaled[key] = int(value)
    return rescaled


def derive_geometry(pose: Any) -> CameraPose:
    """Extract camera center and viewing axis from a camera-to-world matrix.

    The viewing axis is the normalized z column of the rotation block.
    Rotations that are not orthonormal only produce a warning because
    reconstructed poses routinely drift.
    """
    try:
        matrix = np.array(pose, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"pose is not numeric: {exc}") from exc
    if matrix.shape != (4, 4):
        raise DatasetError(f"pose must be 4×4, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise DatasetError("pose contains non-finite values")
    if not np.allclose(matrix[3], (0.0, 0.0, 0.0, 1.0), rtol=0.0, atol=BOTTOM_ROW_TOLERANCE):
        raise DatasetError(f"pose bottom row must be (0, 0, 0, 1), got {matrix[3].tolist()}")

    rotation = matrix[:3, :3]
    z_axis = rotation[:, 2]
    norm = float(np.linalg.norm(z_axis))
    if norm == 0.0:
        raise DatasetError("degenerate rotation")
    if not np.allclose(rotation.T @ rotation, np.eye(3), rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
        log.warning("rotation block is not orthonormal within %g", ORTHONORMAL_TOLERANCE)

    matrix.setflags(write=False)
    center = matrix[:3, 3].copy()
    view_axis = z_axis / norm
    center.setflags(write=False)
    view_axis.setflags(write=False)
    return CameraPose(transform=matrix, center=center, view_axis=view_axis)


def _resolve_image_path(base: Path, file_path: str) -> Path:
    candidate = (base / file_path).resolve()
    if candidate.suffix:
        return candidate
    # NeRF-synthetic manifests omit the extension.
    return candidate.with_suffix(".png")


def load_pose_manifest(path: str | os.PathLike[str], *, scale_factor: int = 4) -> MultiViewSet:
    """Load a NeRF-synthetic style ``transforms.json`` into a MultiViewSet.

    Frame ids follow manifest order. Images are resolved but not decoded.
    """
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise DatasetError(f"pose manifest {manifest_path} does not exist")
    try:
        contents = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"pose manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(contents, dict):
        raise DatasetError(f"pose manifest {manifest_path} must be a JSON object")

    entries = contents.get("frames") or []
    if not entries:
        raise DatasetError("empty dataset")

    base = manifest_path.parent
    seen: dict[Path, int] = {}
    frames: list[FrameRecord] = []
    for frame_id, entry in enumerate(entries):
        file_path = entry.get("file_path") if isinstance(entry, dict) else None
        if not isinstance(file_path, str) or not file_path:
            raise DatasetError(f"frame {frame_id}: missing file_path")
        image_path = _resolve_image_path(base, file_path)
        if image_path in seen:
            raise DatasetError(
                f"frame {frame_id}: duplicate file reference {file_path!r} (also frame {seen[image_path]})"
            )
        if not image_path.is_file():
            raise DatasetError(f"frame {frame_id}: image {image_path} does not exist")
        seen[image_path] = frame_id
        try:
            pose = derive_geometry(entry.get("transform_matrix"))
        except DatasetError as exc:
            raise DatasetError(f"frame {frame_id} ({file_path}): {exc}") from exc
        extra = {key: value for key, value in entry.items() if key not in FRAME_KEYS}
        frames.append(FrameRecord(frame_id=frame_id, source_path=image_path, pose=pose, extra=extra))

    origin = contents.get("scene_origin", (0.0, 0.0, 0.0))
    if len(origin) != 3:
        raise DatasetError(f"scene_origin must have 3 components, got {origin!r}")

    views = MultiViewSet(
        frames=tuple(frames),
        scene_name=contents.get("scene_name") or manifest_path.parent.name,
        scale_factor=int(contents.get("scale_factor", scale_factor)),
        origin=tuple(float(v) for v in origin),
        camera_angle_x=contents.get("camera_angle_x"),
        manifest_path=manifest_path,
        extra={key: value for key, value in contents.items() if key not in MANIFEST_KEYS},
    )
    log.info("Loaded %s frames of scene %s from %s", len(views), views.scene_name, manifest_path)
    return views


def write_pose_manifest(
    views: MultiViewSet,
    path: str | os.PathLike[str],
    file_names: dict[int, str],
    extra: dict[str, Any] | None = None,
) -> None:
    """Write a transforms.json for ``views``; transforms are emitted exactly as loaded.

    Keys the loader did not interpret are written back at the level they came
    from; ``extra`` overrides top-level ones.
    """
    contents: dict[str, Any] = {}
    if views.camera_angle_x is not None:
        contents["camera_angle_x"] = views.camera_angle_x
    contents["scene_name"] = views.scene_name
    if views.origin != (0.0, 0.0, 0.0):
        contents["scene_origin"] = list(views.origin)
    contents.update(views.extra)
    if extra:
        contents.update(extra)
    contents["frames"] = [
        {
            **frame.extra,
            "file_path": file_names[frame.frame_id],
            "transform_matrix": frame.pose.transform.tolist(),
        }
        for frame in views.frames
    ]
    write_json_atomic(path, contents)


def write_text_atomic(path: str | os.PathLike[str], text: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as file:
            file.write(text)
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise


def write_json_atomic(path: str | os.PathLike[str], payload: Any) -> None:
    write_text_atomic(path, json.dumps(payload, indent=4) + "\n")


def read_png(path: str | os.PathLike[str]) -> RasterImage:
    try:
        with Image.open(path) as handle:
            if handle.mode not in ("L", "RGB", "RGBA"):
                handle = handle.convert("RGBA" if "A" in handle.getbands() else "RGB")
            pixels = np.asarray(handle, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return RasterImage(pixels.astype(np.float64) / 255.0)


def write_png(path: str | os.PathLike[str], image: RasterImage) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.rint(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if image.channels == 1:
        pixels = pixels[:, :, 0]
    fd, temp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.stem}.", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(pixels).save(temp_name, format="PNG")
        os.replace(temp_name, target)
    except BaseException:
        Path(temp_name).unlink(missing_ok=True)
        raise


def _cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resample_weights(in_size: int, out_size: int) -> np.ndarray:
    """Row-normalized out_size×in_size bicubic weight matrix with edge clamping.

    When shrinking, the kernel is stretched by the scale so every source pixel
    contributes (the usual antialiased bicubic used to build LR datasets).
    """
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    centers = (np.arange(out_size) + 0.5) * scale - 0.5
    reach = int(math.ceil(2.0 * stretch))
    offsets = np.arange(-reach, reach + 1)
    taps = np.floor(centers)[:, None].astype(np.int64) + offsets[None, :]
    weights = _cubic((taps - centers[:, None]) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)

    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.broadcast_to(np.arange(out_size)[:, None], taps.shape)
    np.add.at(matrix, (rows, np.clip(taps, 0, in_size - 1)), weights)
    return matrix


def bicubic_resample(img: RasterImage, out_w: int, out_h: int) -> RasterImage:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1×1, got {out_w}×{out_h}")
    rows = resample_weights(img.height, out_h)
    cols = resample_weights(img.width, out_w)
    out = np.einsum("oh,hwc->owc", rows, img.data)
    out = np.einsum("pw,owc->opc", cols, out)
    return RasterImage(np.clip(out, 0.0, 1.0))


def degraded_size(width: int, height: int, scale: int) -> tuple[int, int]:
    return math.ceil(width / scale), math.ceil(height / scale)


def degrade_frame(img: RasterImage, scale: int) -> RasterImage:
    out_w, out_h = degraded_size(img.width, img.height, scale)
    return bicubic_resample(img, out_w, out_h)


def composite_background(img: RasterImage, bg: Iterable[float] | float = 0.0) -> RasterImage:
    if img.channels != 4:
        log.warning("composite_background expects RGBA input, got %s channels; passing through", img.channels)
        return img
    background = np.broadcast_to(np.asarray(bg, dtype=np.float64), (3,))
    rgb = img.data[:, :, :3]
    alpha = img.data[:, :, 3:4]
    return RasterImage(np.clip(rgb * alpha + background * (1.0 - alpha), 0.0, 1.0))
