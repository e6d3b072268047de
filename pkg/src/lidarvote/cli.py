"""Command-line entry point: ``lidarvote [options] <stage>``.

Stages: ``synth``, ``align``, ``render``, ``segment``, ``vote``, ``eval``,
and ``run`` for the whole chain. Each stage reuses cached upstream work in
the configured work directory. Exit status is 0 on success, 1 on a stage
failure (diagnostic tagged with the stage on stderr), 2 on bad usage.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import voting
from .errors import StageError
from .pipeline import Pipeline, PipelineConfig

COMMANDS = ("synth", "align", "render", "segment", "vote", "eval", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarvote", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML file of dotted keys")
    parser.add_argument("--force", action="store_true", help="recompute stages even when cached")
    parser.add_argument("--workers", type=int, default=None, help="per-view worker threads")
    parser.add_argument("--seed-override", type=int, default=None, help="replace every seed in the config")
    parser.add_argument("--estimator", choices=voting.ESTIMATORS, default=None)
    parser.add_argument("--compound-mode", choices=voting.COMPOUND_MODES, default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = PipelineConfig.from_file(args.config)
        updates = {}
        if args.seed_override is not None:
            updates.update({k: args.seed_override for k in ("views.seed", "segmenter.seed", "synth.seed")})
        if args.estimator:
            updates["vote.estimator"] = args.estimator
        if args.compound_mode:
            updates["vote.compound_mode"] = args.compound_mode
        if updates:
            cfg = cfg.with_values(updates)
    except Exception as exc:  # config problems are usage errors
        print(f"error [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2

    pipe = Pipeline(cfg, force=args.force, workers=args.workers)
    try:
        if args.command == "synth":
            pipe.synth()
            print(pipe.work / "synth")
        elif args.command == "align":
            pipe.align()
            print(pipe.work / "cloud.npz")
        elif args.command == "render":
            pipe.render()
            print(pipe.work / "views")
        elif args.command == "segment":
            pipe.segment()
            print(pipe.result_dir())
        elif args.command == "vote":
            print(pipe.elect())
        elif args.command == "eval":
            print(pipe.evaluate().to_text(), end="")
        else:
            out = pipe.run()
            print(out["labels"])
            if out["report"] is not None:
                print(out["report"].to_text(), end="")
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
