#!/usr/bin/env python3
# -*- coding: utf-8 -*-

""" Command line interface

Usage::

    prefdiff gen-expert --config configs/default.json
    prefdiff train-bc --config configs/default.json --set diffusion.train_steps=200
    prefdiff report --config configs/default.json

Exit codes: 0 success, 1 usage error or invalid value, 2 missing or unusable
artifact, 3 numerical divergence.

"""

__author__ = "prefdiff developers"
__date__ = "2024-10-10"


import argparse
import logging
import sys
import types

import matplotlib

from . import __version__
from .config import RUN_ROOT_ENV, load_config
from .errors import PrefdiffError
from .pipeline import STAGES, Pipeline


logger = logging.getLogger(__name__)

STAGE_HELP = {
    "gen-expert": "roll out the expert controller and fit the normalization statistics",
    "train-bc": "train one diffusion planner per gait by behavior cloning",
    "rollout": "collect planner rollouts for preference labeling",
    "label": "label segment pairs with weak and strong preferences",
    "align": "align the planners on the preference pairs",
    "eval": "evaluate expert, untrained, offline and aligned planners",
    "ablate": "evaluate the pair budget, label quality and regularization ablations",
    "report": "aggregate the evaluation into tables and figures",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prefdiff",
        description="Preference-aligned diffusion planning for a toy legged-gait simulator.",
        epilog=f"Relative run directories resolve against ${RUN_ROOT_ENV}.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file (defaults if omitted)")
    common.add_argument(
        "-s",
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set align.temperature=100 (repeatable)",
    )
    common.add_argument("-f", "--force", action="store_true", help="rerun up-to-date stages")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--no-progress", action="store_true", help="hide progress bars")
    subparsers = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    for stage in STAGES:
        subparsers.add_parser(stage, parents=[common], help=STAGE_HELP[stage])
    return parser


def run(stage, config=None, overrides=(), *, force=False, progress=True):
    """Run a pipeline stage

    Args:
        stage (str): Subcommand name
        config (str | None): Config file
        overrides (list[str]): ``section.key=value`` overrides
        force (bool): Rerun even if the outputs are up to date
        progress (bool): Show progress bars

    Returns:
        list[str]: Output artifacts of the stage
    """
    cfg = load_config(config, overrides)
    return Pipeline(cfg, force=force, progress=progress).run_stage(stage)


def main(argv=None):
    """Entry point of the ``prefdiff`` command

    Returns:
        int: Exit code
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    matplotlib.use("Agg")
    try:
        run(
            args.stage,
            args.config,
            args.overrides,
            force=args.force,
            progress=not args.no_progress,
        )
    except PrefdiffError as e:
        logger.error("%s", e)
        return e.exit_code
    except ValueError as e:
        logger.error("Invalid value: %s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())


## Restrict star imports to local namespace
__all__ = [
    name
    for name, thing in globals().items()
    if not (name.startswith("_") or isinstance(thing, types.ModuleType))
]
