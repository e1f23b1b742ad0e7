"""Synthetic camera rigs and images shared by the test modules."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from dataset_io import FrameRecord, MultiViewSet, RasterImage, derive_geometry, write_png


def look_at(center: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix whose z column points from ``target`` to ``center``."""
    center = np.asarray(center, dtype=np.float64)
    z = center - np.asarray(target, dtype=np.float64)
    norm = np.linalg.norm(z)
    z = np.array([0.0, 0.0, 1.0]) if norm == 0.0 else z / norm
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    matrix = np.eye(4)
    matrix[:3, 0] = x
    matrix[:3, 1] = y
    matrix[:3, 2] = z
    matrix[:3, 3] = center
    return matrix


def circle_centers(degrees: Iterable[float], radius: float = 4.0) -> list[tuple[float, float, float]]:
    return [
        (radius * math.cos(math.radians(angle)), radius * math.sin(math.radians(angle)), 0.0)
        for angle in degrees
    ]


def ring_degrees(count: int) -> list[float]:
    return [index * 360.0 / count for index in range(count)]


def make_views(
    centers: Sequence[Sequence[float]],
    *,
    scene_name: str = "rig",
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> MultiViewSet:
    frames = tuple(
        FrameRecord(frame_id=index, source_path=None, pose=derive_geometry(look_at(center)))
        for index, center in enumerate(centers)
    )
    return MultiViewSet(frames=frames, scene_name=scene_name, origin=tuple(float(v) for v in origin))


def random_centers(rng: np.random.Generator, count: int) -> list[tuple[float, float, float]]:
    """Points on a sphere shell, never at the origin."""
    directions = rng.normal(size=(count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rng.uniform(2.0, 6.0, size=(count, 1))
    return [tuple(float(v) for v in row) for row in directions * radii]


def textured_image(rng: np.random.Generator, height: int, width: int, channels: int = 3) -> RasterImage:
    noise = rng.random((height, width, channels))
    smooth = ndimage.gaussian_filter(noise, sigma=(1.5, 1.5, 0))
    low, high = smooth.min(), smooth.max()
    data = (smooth - low) / (high - low) if high > low else np.zeros_like(smooth)
    if channels == 4:
        data[:, :, 3] = 1.0
        data[: height // 4, : width // 4, 3] = 0.0
    return RasterImage(data)


def write_dataset(
    directory: Path,
    centers: Sequence[Sequence[float]],
    *,
    size: tuple[int, int] = (64, 64),
    channels: int = 3,
    seed: int = 0,
    scene_name: str = "rig",
) -> Path:
    """Write textured frames plus a NeRF-synthetic transforms.json; returns the manifest path."""
    rng = np.random.default_rng(seed)
    width, height = size
    frames = []
    for index, center in enumerate(centers):
        name = f"train/r_{index}"
        write_png(directory / f"{name}.png", textured_image(rng, height, width, channels))
        frames.append({"file_path": f"./{name}", "transform_matrix": look_at(center).tolist()})
    manifest = directory / "transforms.json"
    manifest.write_text(
        json.dumps({"camera_angle_x": 0.69, "scene_name": scene_name, "frames": frames}, indent=4),
        encoding="utf-8",
    )
    return manifest
