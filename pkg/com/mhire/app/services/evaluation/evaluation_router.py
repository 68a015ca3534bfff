import argparse
from pathlib import Path

from com.mhire.app.services.harness.harness_router import add_common, execute, runner


def _evaluate(args: argparse.Namespace) -> int:
    return execute("evaluate", lambda: runner(args).cmd_evaluate(args.student, args.trigger, args.teacher))


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="measure attack success rate and clean accuracy")
    add_common(parser)
    parser.add_argument("--student", type=Path, required=True, help="student model file")
    parser.add_argument("--trigger", type=Path, required=True, help="trigger file")
    parser.add_argument("--teacher", type=Path, default=None,
                        help="infected teacher; adds the frozen-prefix report when given")
    parser.set_defaults(func=_evaluate)
