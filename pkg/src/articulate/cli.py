"""Command line front end.

    articulate <subcommand> --config <file> [--jobs N] [--seed N] [overrides...]

Overrides are ``key.path=value`` pairs applied on top of the config
file (values parse as JSON where possible).  Exit codes: 0 success,
2 usage, 3 data, 4 numeric, 5 I/O.  Logs go to standard error; reports
and files go where the config points.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .errors import ArticulateError, UsageError
from .pipeline import OutputTracker, PipelineConfig
from . import pipeline

log = logging.getLogger("articulate")

_STAGES = {
    "make-synthetic-corpus": pipeline.stage_make_synthetic_corpus,
    "build-model": pipeline.stage_build_model,
    "correspond": pipeline.stage_correspond,
    "fit": pipeline.stage_fit,
    "estimate-speaker": pipeline.stage_estimate_speaker,
    "train": pipeline.stage_train,
    "synth": pipeline.stage_synth,
    "evaluate": pipeline.stage_evaluate,
    "export-anim": pipeline.stage_export_anim,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="articulate",
        description="Multilinear tongue model pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGES:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="pipeline config JSON")
        cmd.add_argument("--jobs", type=int, default=None,
                         help="worker pool size (default from config)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the pipeline seed")
        cmd.add_argument("overrides", nargs="*",
                         help="config overrides as key.path=value")
        if name == "export-anim":
            cmd.add_argument("--trajectory", required=True,
                             help="pose trajectory JSON to animate")
    return parser


def run_command(args) -> int:
    cfg = PipelineConfig.load(args.config, overrides=args.overrides,
                              jobs=args.jobs, seed=args.seed)
    tracker = OutputTracker()
    stage = _STAGES[args.command]
    started = time.monotonic()
    try:
        if args.command == "export-anim":
            stage(cfg, tracker, args.trajectory)
        else:
            stage(cfg, tracker)
    except BaseException:
        tracker.discard_all()
        raise
    log.info("%s finished in %.1f s", args.command, time.monotonic() - started)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return run_command(args)
    except ArticulateError as exc:
        print(f"articulate: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
