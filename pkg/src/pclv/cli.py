"""Command-line entry point: ``pclv gen | train churn | train pcm | score | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .boosting import ModelFormatError
from .domain import DatasetError

logger = logging.getLogger("pclv")


def _common(default) -> argparse.ArgumentParser:
    # subcommands use SUPPRESS so they do not clobber options given before the command
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=default, help="pipeline configuration JSON")
    common.add_argument("--seed", type=int, default=default, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, metavar="N", default=default, help="cap on worker threads")
    return common


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pclv", description="Customer lifetime value with competitor upside.",
                                parents=[_common(None)])
    common = _common(argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic market")
    train = sub.add_parser("train", parents=[common], help="train the churn or margin model")
    train.add_argument("task", choices=["churn", "pcm"])
    train.add_argument("--skip-hpo", action="store_true", help="use the configured parameters verbatim")
    sub.add_parser("score", parents=[common], help="write valuation.csv")
    sub.add_parser("report", parents=[common], help="write report.csv, report.json and targets.csv")
    return p


def _setup_logging():
    level = os.environ.get("PCLV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _set_threads(n: int | None):
    if n is None:
        return
    if n < 1:
        raise pipeline.ConfigError("--threads must be >= 1")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _config(args) -> pipeline.PipelineConfig:
    config = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        try:
            config = replace(config, seed=args.seed)
        except ValueError as exc:
            raise pipeline.ConfigError(str(exc)) from exc
    return config


def run(args) -> int:
    _set_threads(args.threads)
    config = _config(args)
    if args.command == "gen":
        print(json.dumps(pipeline.cmd_gen(config), indent=2))
    elif args.command == "train":
        metrics = pipeline.cmd_train(config, args.task, skip_hpo=args.skip_hpo)
        print(json.dumps({"task": args.task, "summary": metrics["summary"]}, indent=2))
    elif args.command == "score":
        print(pipeline.cmd_score(config))
    elif args.command == "report":
        out = pipeline.cmd_report(config)
        print(json.dumps({"upside": out["upside"], "overall_upside_pct": out["overall_upside_pct"]}, indent=2))
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        return run(args)
    except pipeline.ConfigError as exc:
        print(f"pclv: config error: {exc}", file=sys.stderr)
        return 2
    except (pipeline.MissingInputError, DatasetError, ModelFormatError, FileNotFoundError,
            OSError, ValueError, KeyError) as exc:
        print(f"pclv: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
