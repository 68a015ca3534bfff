import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from com.mhire.app.config.config import Config
from com.mhire.app.services.defenses.defenses_router import register as register_defenses
from com.mhire.app.services.evaluation.evaluation_router import register as register_evaluation
from com.mhire.app.services.harness.harness_router import register as register_harness
from com.mhire.app.services.latent_attack.latent_attack_router import register as register_latent_attack
from com.mhire.app.services.transfer_learn.transfer_learn_router import register as register_transfer_learn

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-backdoor",
        description="Latent backdoor experiments: train, infect, transfer, evaluate and defend",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register routers
    register_harness(subparsers)
    register_latent_attack(subparsers)
    register_transfer_learn(subparsers)
    register_evaluation(subparsers)
    register_defenses(subparsers)
    return parser


def configure_logging(command: str, out: Optional[Path]) -> None:
    settings = Config()
    root = logging.getLogger()
    root.setLevel(settings.log_level)
    log_dir = out if out is not None else settings.output_root
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_dir / f"{command}.log")
    except OSError as e:
        logger.warning(f"Cannot open log file in {log_dir}: {str(e)}")
        return
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.command, args.out)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
