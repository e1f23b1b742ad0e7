from __future__ import annotations

import argparse
import logging
from typing import TYPE_CHECKING

from config import PipelineConfig

from ._helpers import add_upsampler_arguments, load_config
from .aggregate import aggregate_outputs
from .degrade import degrade
from .eval import evaluate_workspace
from .plan import plan
from .report import report
from .upsample import upsample

if TYPE_CHECKING:
    from cli import PipelineCli

log = logging.getLogger(__name__)


description = """
Run degrade, plan, upsample, aggregate, eval and report in one go.
"""


def run_pipeline(
    config: PipelineConfig,
    *,
    timeout: float | None = None,
    evaluate: bool = True,
    dump_scores: bool = False,
) -> None:
    degrade(config)
    plan(config, dump_scores=dump_scores)
    upsample(config, timeout)
    aggregate_outputs(config)
    if evaluate:
        evaluate_workspace(config)
    report(config)
    log.info("Pipeline finished; outputs in %s", config.output)


def _run(cli: PipelineCli, args: argparse.Namespace) -> None:
    run_pipeline(
        load_config(args),
        timeout=cli.upsample_timeout,
        evaluate=not args.skip_eval,
        dump_scores=args.dump_scores,
    )


def setup(cli: PipelineCli) -> None:
    command = cli.add_command("run", _run, description)
    add_upsampler_arguments(command)
    command.add_argument("--skip-eval", action="store_true", help="do not score the HR output against the dataset")
    command.add_argument("--dump-scores", action="store_true", help="also write every pairwise score to scores.csv")
