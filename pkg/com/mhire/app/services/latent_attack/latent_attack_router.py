import argparse
from pathlib import Path

from com.mhire.app.services.harness.harness_router import add_common, execute, runner


def _infect(args: argparse.Namespace) -> int:
    return execute("infect", lambda: runner(args).cmd_infect(args.teacher))


def register(subparsers) -> None:
    """
    infect: retrain with the target, optimize the trigger, inject it at K_t
    and wipe the target from the head. Writes the infected teacher, the
    trigger file and an injection report.
    """
    parser = subparsers.add_parser("infect", help="inject a latent backdoor into a teacher model")
    add_common(parser)
    parser.add_argument("--teacher", type=Path, required=True, help="clean teacher model file")
    parser.set_defaults(func=_infect)
