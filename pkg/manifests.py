from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from dataset_io import DatasetError, write_json_atomic
from ordering import CoverageState, Plan, Provenance, Subsequence

SPEC_VERSION = "1.0"
MANIFEST_VERSION = 1
OUTPUT_LAYOUT = "subseq_{subseq_id:05}/frame_{frame_id:05}.png"


def frame_file_name(frame_id: int) -> str:
    return f"frame_{frame_id:05}.png"


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _read_json(path: Path, kind: str) -> dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"{kind} {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{kind} {path} is not valid JSON: {exc}") from exc
    if data.get("spec_version") != SPEC_VERSION:
        raise DatasetError(f"{kind} {path} has spec_version {data.get('spec_version')!r}, expected {SPEC_VERSION}")
    return data


class PlanFile:
    @staticmethod
    def write(
        path: str | os.PathLike[str],
        plan: Plan,
        *,
        scene: str,
        frame_count: int,
        thresholds: Iterable[float],
        config: dict[str, Any],
    ) -> None:
        subsequences, coverage = plan
        payload = {
            "spec_version": SPEC_VERSION,
            "scene": scene,
            "frame_count": frame_count,
            "config": config,
            "rounds": [{"round": index, "epsilon": epsilon} for index, epsilon in enumerate(thresholds)],
            "subsequences": [
                {
                    "subseq_id": seq.subseq_id,
                    "round": seq.round,
                    "start_frame": seq.start_frame,
                    "frames": list(seq.frames),
                    "transition_scores": [
                        [_finite_or_none(select), _finite_or_none(gate)] for select, gate in seq.transition_scores
                    ],
                }
                for seq in subsequences
            ],
            "coverage": [
                {"frame_id": frame_id, **coverage.provenance[frame_id]._asdict()}
                for frame_id in sorted(coverage.provenance)
            ],
        }
        write_json_atomic(path, payload)

    @staticmethod
    def load(path: str | os.PathLike[str]) -> tuple[Plan, dict[str, Any]]:
        data = _read_json(Path(path), "plan")

        def score(value: float | None) -> float:
            return math.inf if value is None else float(value)

        subsequences = [
            Subsequence(
                subseq_id=int(entry["subseq_id"]),
                round=int(entry["round"]),
                start_frame=int(entry["start_frame"]),
                frames=tuple(int(frame_id) for frame_id in entry["frames"]),
                transition_scores=tuple((score(a), score(b)) for a, b in entry["transition_scores"]),
            )
            for entry in data["subsequences"]
        ]
        coverage = CoverageState()
        for entry in data["coverage"]:
            frame_id = int(entry["frame_id"])
            coverage.covered.add(frame_id)
            coverage.provenance[frame_id] = Provenance(int(entry["round"]), int(entry["subseq_id"]), int(entry["position"]))
        meta = {key: value for key, value in data.items() if key not in ("subsequences", "coverage")}
        return Plan(subsequences, coverage), meta


@dataclass(frozen=True)
class ManifestEntry:
    subseq_id: int
    round: int
    frames: tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class UpsampleManifest:
    """The contract handed to an upsampling backend.

    LR paths are relative to the manifest's directory. Outputs are expected at
    ``<outdir>/subseq_XXXXX/frame_XXXXX.png`` with dimensions LR × scale_factor.
    """

    path: Path
    scale_factor: int
    lr_size: tuple[int, int]
    subsequences: tuple[ManifestEntry, ...]

    @property
    def hr_size(self) -> tuple[int, int]:
        return self.lr_size[0] * self.scale_factor, self.lr_size[1] * self.scale_factor

    def lr_path(self, relative: str) -> Path:
        return self.path.parent / relative

    @staticmethod
    def expected_output(outdir: Path, subseq_id: int, frame_id: int) -> Path:
        return outdir / OUTPUT_LAYOUT.format(subseq_id=subseq_id, frame_id=frame_id)

    def entry(self, subseq_id: int) -> ManifestEntry:
        for entry in self.subsequences:
            if entry.subseq_id == subseq_id:
                return entry
        raise KeyError(subseq_id)

    def only(self, subseq_id: int, path: Path) -> UpsampleManifest:
        """Single-subsequence manifest for backends invoked once per clip."""
        entry = self.entry(subseq_id)
        frames = tuple(
            (frame_id, Path(os.path.relpath(self.lr_path(relative), path.parent)).as_posix())
            for frame_id, relative in entry.frames
        )
        rebased = ManifestEntry(subseq_id=entry.subseq_id, round=entry.round, frames=frames)
        return UpsampleManifest(path=path, scale_factor=self.scale_factor, lr_size=self.lr_size, subsequences=(rebased,))


class UpsampleManifestFile:
    @staticmethod
    def build(path: Path, plan: Plan, lr_dir: Path, scale_factor: int, lr_size: tuple[int, int]) -> UpsampleManifest:
        entries = []
        for seq in plan.subsequences:
            frames = []
            for frame_id in seq.frames:
                lr_file = lr_dir / frame_file_name(frame_id)
                if not lr_file.is_file():
                    raise DatasetError(f"subsequence {seq.subseq_id}: LR frame {lr_file} does not exist")
                frames.append((frame_id, Path(os.path.relpath(lr_file, path.parent)).as_posix()))
            entries.append(ManifestEntry(subseq_id=seq.subseq_id, round=seq.round, frames=tuple(frames)))
        ids = [entry.subseq_id for entry in entries]
        if len(set(ids)) != len(ids):
            raise DatasetError("subsequence ids in an upsample manifest must be unique")
        return UpsampleManifest(path=path, scale_factor=scale_factor, lr_size=lr_size, subsequences=tuple(entries))

    @staticmethod
    def write(manifest: UpsampleManifest) -> None:
        payload = {
            "spec_version": SPEC_VERSION,
            "version": MANIFEST_VERSION,
            "scale_factor": manifest.scale_factor,
            "lr_size": list(manifest.lr_size),
            "hr_size": list(manifest.hr_size),
            "output_layout": OUTPUT_LAYOUT,
            "subsequences": [
                {
                    "subseq_id": entry.subseq_id,
                    "round": entry.round,
                    "frames": [{"frame_id": frame_id, "path": relative} for frame_id, relative in entry.frames],
                }
                for entry in manifest.subsequences
            ],
        }
        write_json_atomic(manifest.path, payload)

    @staticmethod
    def load(path: str | os.PathLike[str]) -> UpsampleManifest:
        manifest_path = Path(path)
        data = _read_json(manifest_path, "upsample manifest")
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported upsample manifest version {data.get('version')!r}")
        entries = tuple(
            ManifestEntry(
                subseq_id=int(entry["subseq_id"]),
                round=int(entry["round"]),
                frames=tuple((int(frame["frame_id"]), str(frame["path"])) for frame in entry["frames"]),
            )
            for entry in data["subsequences"]
        )
        width, height = data["lr_size"]
        return UpsampleManifest(
            path=manifest_path,
            scale_factor=int(data["scale_factor"]),
            lr_size=(int(width), int(height)),
            subsequences=entries,
        )
