import argparse
from pathlib import Path

from com.mhire.app.services.harness.harness_router import add_common, execute, runner


def _transfer(args: argparse.Namespace) -> int:
    return execute("transfer", lambda: runner(args).cmd_transfer(args.teacher))


def register(subparsers) -> None:
    parser = subparsers.add_parser("transfer", help="build and fine-tune a student from a teacher")
    add_common(parser)
    parser.add_argument("--teacher", type=Path, required=True, help="teacher model file")
    parser.set_defaults(func=_transfer)
