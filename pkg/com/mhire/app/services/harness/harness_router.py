import argparse
import logging
from pathlib import Path
from typing import Callable

from com.mhire.app.config.errors import LatentBackdoorError
from com.mhire.app.services.harness.experiment_config import load_config
from com.mhire.app.services.harness.harness import ExperimentRunner, bundle_names, cmd_reproduce, load_bundles
from com.mhire.app.services.harness.harness_schema import ExperimentConfig

logger = logging.getLogger(__name__)


def execute(command: str, action: Callable[[], object]) -> int:
    """Run a command body and map failures to the exit code of their error family."""
    try:
        action()
        return 0
    except LatentBackdoorError as e:
        stage = f" (stage={e.stage})" if e.stage else ""
        logger.error(f"Error in {command}{stage}: {str(e)}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {command}: {str(e)}")
        return 1


def add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, required=config_required, help="experiment INI file")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides [experiment] output_dir)")


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config is not None else ExperimentConfig()
    if args.out is not None:
        config = config.model_copy(update={
            "experiment": config.experiment.model_copy(update={"output_dir": str(args.out)}),
        })
    return config


def runner(args: argparse.Namespace) -> ExperimentRunner:
    return ExperimentRunner(load_experiment(args))


def _train_teacher(args: argparse.Namespace) -> int:
    return execute("train-teacher", lambda: runner(args).cmd_train_teacher())


def _reproduce(args: argparse.Namespace) -> int:
    def action():
        config = load_experiment(args)
        report = cmd_reproduce(args.bundle, config=config)
        if not report.passed:
            logger.warning(f"Bundle {args.bundle} finished with failing checks")

    return execute("reproduce", action)


def register(subparsers) -> None:
    train = subparsers.add_parser("train-teacher", help="train a clean teacher model")
    add_common(train)
    train.set_defaults(func=_train_teacher)

    reproduce = subparsers.add_parser("reproduce", help="run a reproduction bundle and write its report")
    reproduce.add_argument("bundle", choices=bundle_names(load_bundles()))
    add_common(reproduce, config_required=False)
    reproduce.set_defaults(func=_reproduce)
