from __future__ import annotations

import logging
import shlex
import subprocess
import threading
from concurrent.futures import Executor, ThreadPoolExecutor
from pathlib import Path

from PIL import Image

from config import UpsamplerConfig, UpsamplerKind
from dataset_io import bicubic_resample, read_png, write_png
from manifests import UpsampleManifest, UpsampleManifestFile

log = logging.getLogger(__name__)

# One external backend process at a time, whatever the caller's threading.
_external_lock = threading.Lock()


class UpsampleError(RuntimeError):
    """Raised when a backend fails or leaves incomplete output."""


def verify_outputs(manifest: UpsampleManifest, outdir: Path) -> None:
    expected_size = manifest.hr_size
    for entry in manifest.subsequences:
        for frame_id, _ in entry.frames:
            path = manifest.expected_output(outdir, entry.subseq_id, frame_id)
            if not path.is_file():
                raise UpsampleError(f"subsequence {entry.subseq_id}: missing output {path}")
            try:
                with Image.open(path) as handle:
                    size = handle.size
            except OSError as exc:
                raise UpsampleError(f"subsequence {entry.subseq_id}: unreadable output {path}: {exc}") from exc
            if size != expected_size:
                raise UpsampleError(
                    f"subsequence {entry.subseq_id}: {path.name} is {size[0]}×{size[1]}, "
                    f"expected {expected_size[0]}×{expected_size[1]}"
                )


class ReferenceUpsampler:
    """Bicubic ×s upsampling in-process; the deterministic stand-in for a VSR backend."""

    def __init__(self, executor: Executor | None = None, workers: int | None = None) -> None:
        self._executor = executor
        self._owns_executor = executor is None
        self._workers = workers

    def __enter__(self) -> ReferenceUpsampler:
        self._ensure_executor()
        return self

    def __exit__(self, *_) -> None:
        if self._owns_executor:
            self.close()

    def _ensure_executor(self) -> Executor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self._workers)
        return self._executor

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def upsample(self, manifest: UpsampleManifest, outdir: Path) -> None:
        width, height = manifest.hr_size
        sources: dict[int, str] = {}
        for entry in manifest.subsequences:
            for frame_id, relative in entry.frames:
                sources.setdefault(frame_id, relative)

        def upsample_frame(frame_id: int) -> None:
            hr = bicubic_resample(read_png(manifest.lr_path(sources[frame_id])), width, height)
            for entry in manifest.subsequences:
                if any(member == frame_id for member, _ in entry.frames):
                    write_png(manifest.expected_output(outdir, entry.subseq_id, frame_id), hr)

        executor = self._ensure_executor()
        list(executor.map(upsample_frame, sorted(sources)))
        log.info("Reference-upsampled %s distinct frames into %s", len(sources), outdir)


class ExternalUpsampler:
    """Runs a VSR backend through its command template.

    ``{manifest}`` and ``{outdir}`` are substituted, plus ``{subseq_id}`` when
    the backend is invoked once per subsequence.
    """

    def __init__(self, command: str, timeout: float | None = None, per_subsequence: bool = False) -> None:
        self.command = command
        self.timeout = timeout
        self.per_subsequence = per_subsequence

    def __enter__(self) -> ExternalUpsampler:
        return self

    def __exit__(self, *_) -> None:
        return None

    def _arguments(self, manifest: Path, outdir: Path, subseq_id: int | None) -> list[str]:
        values = {"{manifest}": str(manifest), "{outdir}": str(outdir)}
        if subseq_id is not None:
            values["{subseq_id}"] = str(subseq_id)
        arguments = []
        for token in shlex.split(self.command):
            for placeholder, value in values.items():
                token = token.replace(placeholder, value)
            arguments.append(token)
        return arguments

    def _run(self, arguments: list[str], label: str) -> None:
        log.info("Invoking upsampler for %s: %s", label, shlex.join(arguments))
        with _external_lock:
            try:
                result = subprocess.run(arguments, capture_output=True, text=True, timeout=self.timeout, check=False)
            except OSError as exc:
                raise UpsampleError(f"{label}: cannot start upsampler: {exc}") from exc
            except subprocess.TimeoutExpired as exc:
                raise UpsampleError(f"{label}: upsampler timed out after {self.timeout} s") from exc
        if result.stdout:
            log.debug("upsampler stdout (%s): %s", label, result.stdout.strip()[-2000:])
        if result.returncode != 0:
            raise UpsampleError(
                f"{label}: upsampler exited with status {result.returncode}: {result.stderr.strip()[-2000:]}"
            )

    def upsample(self, manifest: UpsampleManifest, outdir: Path) -> None:
        outdir.mkdir(parents=True, exist_ok=True)
        if not self.per_subsequence:
            self._run(self._arguments(manifest.path, outdir, None), "all subsequences")
            return
        clip_dir = manifest.path.parent / "clips"
        for entry in manifest.subsequences:
            clip = manifest.only(entry.subseq_id, clip_dir / f"subseq_{entry.subseq_id:05}.json")
            UpsampleManifestFile.write(clip)
            self._run(self._arguments(clip.path, outdir, entry.subseq_id), f"subsequence {entry.subseq_id}")


def make_upsampler(
    config: UpsamplerConfig, *, timeout: float | None = None, workers: int | None = None
) -> ReferenceUpsampler | ExternalUpsampler:
    if config.kind is UpsamplerKind.EXTERNAL:
        return ExternalUpsampler(config.command, timeout=timeout, per_subsequence=config.per_subsequence)
    return ReferenceUpsampler(workers=workers)


def run_upsampler(
    config: UpsamplerConfig,
    manifest: UpsampleManifest,
    outdir: Path,
    *,
    timeout: float | None = None,
    workers: int | None = None,
) -> None:
    """Run the configured backend and check its output contract before returning."""
    with make_upsampler(config, timeout=timeout, workers=workers) as backend:
        backend.upsample(manifest, outdir)
    verify_outputs(manifest, outdir)
