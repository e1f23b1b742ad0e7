from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from metrics import LossWeights
from orb import OrbConfig
from ordering import OrderingConfig, StartPolicy, ThresholdMode
from similarity import DEFAULT_MIN_MATCHES, MeasureKind


class ConfigError(ValueError):
    """Raised for invalid or inconsistent pipeline configuration."""


class UpsamplerKind(str, Enum):
    EXTERNAL = "external"
    REFERENCE_BICUBIC = "reference_bicubic"


@dataclass(frozen=True)
class UpsamplerConfig:
    kind: UpsamplerKind = UpsamplerKind.REFERENCE_BICUBIC
    command: str | None = None
    per_subsequence: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", UpsamplerKind(self.kind))
        if self.kind is UpsamplerKind.EXTERNAL:
            if not self.command:
                raise ConfigError("external upsampler needs a command template")
            for placeholder in ("{manifest}", "{outdir}"):
                if placeholder not in self.command:
                    raise ConfigError(f"upsampler command must contain {placeholder}")


# Per-benchmark defaults. Angle thresholds are degrees here.
PRESETS: dict[str, dict[str, Any]] = {
    "blender": {
        "scale_factor": 4,
        "ordering": {
            "select_measure": MeasureKind.ORB_MEAN_MATCH.value,
            "threshold_measure": MeasureKind.POSE_ANGLE_TO_ORIGIN.value,
            "threshold_mode": ThresholdMode.VALUE.value,
            "thresholds": [15.0, 30.0, 45.0],
        },
        "loss_weights": {"lambda1": 0.2, "lambda_ren": 0.6},
    },
    "mipnerf360": {
        "scale_factor": 4,
        "ordering": {
            "select_measure": MeasureKind.POSE_CENTER_DISTANCE.value,
            "threshold_measure": MeasureKind.POSE_CENTER_DISTANCE.value,
            "threshold_mode": ThresholdMode.CANDIDATE_RANK.value,
            "thresholds": [30, 50],
        },
        "loss_weights": {"lambda1": 0.2, "lambda_ren": 0.4},
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    dataset: Path
    output: Path = Path("output")
    preset: str = "blender"
    scale_factor: int = 4
    ordering: OrderingConfig = field(default_factory=OrderingConfig)
    orb: OrbConfig = field(default_factory=OrbConfig)
    min_matches: int = DEFAULT_MIN_MATCHES
    loss_weights: LossWeights = field(default_factory=LossWeights)
    upsampler: UpsamplerConfig = field(default_factory=UpsamplerConfig)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_origin: tuple[float, float, float] | None = None
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.scale_factor < 2:
            raise ConfigError(f"scale_factor must be at least 2, got {self.scale_factor}")
        if len(self.background) != 3 or not all(0.0 <= v <= 1.0 for v in self.background):
            raise ConfigError(f"background must be three values in [0, 1], got {self.background}")

    def resolve(self, root: Path) -> PipelineConfig:
        """Anchor relative paths at ``root``."""
        return replace(self, dataset=root / self.dataset, output=root / self.output)


def _merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _pick(cls: type, raw: Mapping[str, Any], section: str) -> dict[str, Any]:
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return dict(raw)


def _ordering_from_dict(raw: Mapping[str, Any]) -> OrderingConfig:
    values = _pick(OrderingConfig, raw, "ordering")
    try:
        mode = ThresholdMode(values.get("threshold_mode", ThresholdMode.VALUE))
        measure = MeasureKind(values.get("threshold_measure", MeasureKind.POSE_ANGLE_TO_ORIGIN))
        if "thresholds" in values and mode is ThresholdMode.VALUE and measure.is_angle:
            values["thresholds"] = [math.radians(v) for v in values["thresholds"]]
        if "misalignment_threshold" in values:
            values["misalignment_threshold"] = math.radians(values["misalignment_threshold"])
        if "start_policy" in values:
            values["start_policy"] = StartPolicy(values["start_policy"])
        return OrderingConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"ordering: {exc}") from exc


def pipeline_config_from_dict(raw: Mapping[str, Any], preset: str | None = None) -> PipelineConfig:
    preset = preset or raw.get("preset") or "blender"
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], raw)
    if "dataset" not in merged:
        raise ConfigError("config must name a dataset manifest")

    orb_raw = dict(merged.get("orb", {}))
    min_matches = int(orb_raw.pop("min_matches", DEFAULT_MIN_MATCHES))
    background = tuple(float(v) for v in merged.get("background", (0.0, 0.0, 0.0)))
    try:
        orb = OrbConfig(**{**_pick(OrbConfig, orb_raw, "orb"), "background": background})
        weights = LossWeights(**_pick(LossWeights, merged.get("loss_weights", {}), "loss_weights"))
        upsampler = UpsamplerConfig(**_pick(UpsamplerConfig, merged.get("upsampler", {}), "upsampler"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    origin = merged.get("scene_origin")
    return PipelineConfig(
        dataset=Path(merged["dataset"]),
        output=Path(merged.get("output", "output")),
        preset=preset,
        scale_factor=int(merged.get("scale_factor", 4)),
        ordering=_ordering_from_dict(merged.get("ordering", {})),
        orb=orb,
        min_matches=min_matches,
        loss_weights=weights,
        upsampler=upsampler,
        background=background,
        scene_origin=None if origin is None else tuple(float(v) for v in origin),
        workers=merged.get("workers"),
    )


def load_pipeline_config(
    path: str | Path | None,
    *,
    preset: str | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> PipelineConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return pipeline_config_from_dict(_merge(raw, overrides or {}), preset)


def describe(config: PipelineConfig) -> dict[str, Any]:
    """JSON-friendly echo of a config, angles back in degrees."""
    ordering = config.ordering
    angle_thresholds = ordering.threshold_mode is ThresholdMode.VALUE and ordering.threshold_measure.is_angle
    return {
        "preset": config.preset,
        "scale_factor": config.scale_factor,
        "ordering": {
            "select_measure": ordering.select_measure.value,
            "threshold_measure": ordering.threshold_measure.value,
            "threshold_mode": ordering.threshold_mode.value,
            "thresholds": [round(math.degrees(v), 9) if angle_thresholds else v for v in ordering.thresholds],
            "threshold_units": "degrees" if angle_thresholds else (
                "candidates" if ordering.threshold_mode is ThresholdMode.CANDIDATE_RANK else "measure"
            ),
            "min_subseq_len": ordering.min_subseq_len,
            "start_policy": ordering.start_policy.value,
            "start_frame": ordering.start_frame,
            "misalignment_threshold": round(math.degrees(ordering.misalignment_threshold), 9),
        },
        "orb": {**asdict(config.orb), "min_matches": config.min_matches},
        "loss_weights": asdict(config.loss_weights),
        "background": list(config.background),
        "scene_origin": None if config.scene_origin is None else list(config.scene_origin),
    }
