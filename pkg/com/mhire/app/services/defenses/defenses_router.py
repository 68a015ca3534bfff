import argparse
from pathlib import Path

from com.mhire.app.services.harness.harness_router import add_common, execute, runner

DEFENSES = ("fine-prune", "blur", "multilayer")


def _defend(args: argparse.Namespace) -> int:
    return execute(
        "defend", lambda: runner(args).cmd_defend(args.defense, args.trigger, args.student, args.teacher)
    )


def register(subparsers) -> None:
    parser = subparsers.add_parser("defend", help="run a defense sweep and write its curve as CSV")
    add_common(parser)
    parser.add_argument("--defense", choices=DEFENSES, required=True)
    parser.add_argument("--trigger", type=Path, required=True, help="trigger file")
    parser.add_argument("--student", type=Path, default=None, help="student model file (fine-prune, blur)")
    parser.add_argument("--teacher", type=Path, default=None, help="infected teacher model file (multilayer)")
    parser.set_defaults(func=_defend)
