"""
Experiment config files: INI sections mapped one-to-one onto
ExperimentConfig fields. Lists are comma separated, booleans are
true/false, unset optional keys are simply absent.

    [experiment]
    name = digit
    seed = 0

    [attack]
    inject_layer = 3
    lambda = 1.0
"""
import configparser
import io
import logging
from pathlib import Path

from pydantic import ValidationError

from com.mhire.app.config.config import Config
from com.mhire.app.config.errors import ConfigError
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.harness.harness_schema import ExperimentConfig
from com.mhire.app.services.latent_attack.latent_attack_schema import InjectionConfig, TriggerConfig
from com.mhire.app.services.transfer_learn.transfer_learn_schema import TransferConfig

logger = logging.getLogger(__name__)

# per-stage offsets from the experiment seed
TEACHER_SEED, INJECT_SEED, TRANSFER_SEED, HEAD_SEED, TRIGGER_SEED = 0, 1, 2, 3, 4


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = _parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        logger.error(f"Error parsing config {source}: {str(e)}")
        raise ConfigError("malformed-config", f"{source}: {e}")
    unknown = set(parser.sections()) - set(ExperimentConfig.model_fields)
    if unknown:
        raise ConfigError("unknown-section", f"{source}: {', '.join(sorted(unknown))}")
    try:
        return ExperimentConfig.model_validate({name: dict(parser[name]) for name in parser.sections()})
    except ValidationError as e:
        logger.error(f"Error validating config {source}: {str(e)}")
        raise ConfigError("invalid-config", f"{source}: {e}")


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config-not-found", f"no config file at {path}")
    return parse_config(path.read_text(), source=str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    """Deterministic text form: sections sorted by name, keys in declaration order."""
    parser = _parser()
    for name in sorted(ExperimentConfig.model_fields):
        section = getattr(config, name).model_dump(by_alias=True, exclude_none=True)
        parser[name] = {key: _format(value) for key, value in section.items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def save_config(config: ExperimentConfig, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_config(config))


def output_dir(config: ExperimentConfig) -> Path:
    if config.experiment.output_dir:
        return Path(config.experiment.output_dir)
    return Config().output_root / config.experiment.name


def teacher_sgd(config: ExperimentConfig) -> SgdConfig:
    return config.teacher_training.sgd(config.experiment.seed + TEACHER_SEED)


def retrain_sgd(config: ExperimentConfig) -> SgdConfig:
    return config.teacher_training.sgd(config.experiment.seed + INJECT_SEED)


def injection_config(config: ExperimentConfig) -> InjectionConfig:
    attack, trigger = config.attack, config.trigger
    return InjectionConfig(
        lambda_=attack.lambda_,
        training=config.injection.sgd(config.experiment.seed + INJECT_SEED),
        trigger=TriggerConfig(
            seed=config.experiment.seed + TRIGGER_SEED,
            **trigger.model_dump(exclude={"init"}),
        ),
        phi_refresh_epochs=attack.phi_refresh_epochs,
        eps_feat_ratio=attack.eps_feat_ratio,
        accuracy_budget=attack.accuracy_budget,
        enforce_feature_gap=attack.enforce_feature_gap and trigger.init == "optimized",
    )


def transfer_config(config: ExperimentConfig, student_class_count: int) -> TransferConfig:
    return TransferConfig(
        frozen_layers=config.transfer.frozen_layers,
        student_class_count=student_class_count,
        training=config.transfer.sgd(config.experiment.seed + TRANSFER_SEED),
        validation_fraction=config.transfer.validation_fraction,
        seed=config.experiment.seed + HEAD_SEED,
    )
