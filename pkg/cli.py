from __future__ import annotations

import argparse
import importlib
import logging
from pathlib import Path
from types import ModuleType
from typing import Callable, Iterable

from config import PRESETS, ConfigError
from dataset_io import DatasetError
from ordering import AggregateError
from upsampler import UpsampleError

log = logging.getLogger(__name__)

Handler = Callable[["PipelineCli", argparse.Namespace], None]

DOMAIN_ERRORS = (DatasetError, ConfigError, AggregateError, UpsampleError)


def _discover_module_names(package: str, directory: Path) -> list[str]:
    if not directory.exists():
        log.warning("%s directory %s does not exist", package, directory.resolve())
        return []

    module_names: list[str] = []
    for module_path in sorted(directory.glob("*.py")):
        if module_path.name.startswith("_"):
            continue
        module_names.append(f"{package}.{module_path.stem}")

    return module_names


def _import_modules(module_names: Iterable[str]) -> list[ModuleType]:
    modules: list[ModuleType] = []
    for name in module_names:
        modules.append(importlib.import_module(name))
    return modules


COMMAND_MODULE_NAMES = _discover_module_names("Commands", Path(__file__).resolve().parent / "Commands")
COMMAND_MODULES = _import_modules(COMMAND_MODULE_NAMES)


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--root", type=Path, default=Path("."), help="directory every relative path is resolved against")
    common.add_argument("--config", type=Path, help="pipeline config JSON, relative to --root")
    common.add_argument("--preset", choices=sorted(PRESETS), help="benchmark defaults to start from")
    common.add_argument("--dataset", help="HR pose manifest (transforms.json), relative to --root")
    common.add_argument("--output", help="workspace directory, relative to --root")
    common.add_argument("--scale-factor", type=int, help="super-resolution factor")
    common.add_argument("--scene-origin", type=float, nargs=3, metavar=("X", "Y", "Z"))
    common.add_argument("--workers", type=int, help="per-frame concurrency (default: CPU count)")
    common.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    return common


class PipelineCli:
    def __init__(self, upsample_timeout: float | None = None) -> None:
        self.upsample_timeout = upsample_timeout
        self.common = _common_arguments()
        self.parser = argparse.ArgumentParser(
            prog="seqsr",
            description="Order multi-view images into smooth subsequences for video super-resolution.",
        )
        self.subparsers = self.parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        self._register_modules(COMMAND_MODULES)

    def _register_modules(self, modules: Iterable[ModuleType]) -> None:
        for module in modules:
            setup_callable = getattr(module, "setup", None)
            if setup_callable is None:
                log.debug("Module %s does not expose setup(), skipping", module.__name__)
                continue
            setup_callable(self)
            log.debug("Registered command module %s", module.__name__)

    def add_command(self, name: str, handler: Handler, description: str) -> argparse.ArgumentParser:
        text = description.strip()
        command = self.subparsers.add_parser(
            name,
            parents=[self.common],
            help=text.splitlines()[0] if text else None,
            description=text,
        )
        command.set_defaults(handler=handler)
        return command

    def parse(self, argv: list[str] | None = None) -> argparse.Namespace:
        return self.parser.parse_args(argv)

    def dispatch(self, args: argparse.Namespace) -> int:
        try:
            args.handler(self, args)
        except DOMAIN_ERRORS as exc:
            log.error("%s failed: %s", args.command, exc)
            return 1
        return 0
