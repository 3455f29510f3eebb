"""Command-line entry point.

Subcommands: generate, train, sweep-clusters, compare, ablate.  Each takes
``--config`` (key = value text) and ``--out`` (output directory).  Exit code
0 on success, 2 when some neighborhoods failed but the run completed, 1 on
any other error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import MsclusterError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are errors
        raise MsclusterError(f"argument error: {message}")


COMMANDS = {
    "generate": pipeline.cmd_generate,
    "train": pipeline.cmd_train,
    "sweep-clusters": pipeline.cmd_sweep_clusters,
    "compare": pipeline.cmd_compare,
    "ablate": pipeline.cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mscluster", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="key = value config file")
        cmd.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        spec = pipeline.spec_from_file(args.config, out_dir=args.out)
        return COMMANDS[args.command](spec)
    except MsclusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
