import logging
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig

logger = logging.getLogger(__name__)


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "digit"
    task: Literal["digit", "toy"] = "digit"
    seed: int = 0
    output_dir: Optional[str] = None
    workers: Optional[int] = Field(None, ge=1)  # default: LATENT_WORKERS


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["mnist", "synthetic"] = "mnist"
    train_images: str = "train-images-idx3-ubyte.gz"
    train_labels: str = "train-labels-idx1-ubyte.gz"
    test_images: str = "t10k-images-idx3-ubyte.gz"
    test_labels: str = "t10k-labels-idx1-ubyte.gz"
    synthetic_per_class: int = Field(120, gt=0)
    synthetic_test_per_class: int = Field(40, gt=0)
    image_side: int = Field(28, gt=0)
    # trigger area on synthetic data, which replaces [attack] mask_fraction there
    synthetic_mask_fraction: float = Field(0.25, gt=0.0, le=1.0)
    target_label: int = 9  # original label space
    target_count: int = Field(45, gt=0)
    nontarget_count: Optional[int] = Field(None, gt=0)
    student_count: Optional[int] = Field(None, gt=0)
    eval_count: int = Field(5000, gt=0)


class AttackSection(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    inject_layer: int = Field(3, ge=1)  # K_t
    mask_fraction: float = Field(0.04, gt=0.0, le=1.0)
    lambda_: float = Field(1.0, ge=0.0, alias="lambda")
    eps_feat_ratio: float = Field(0.1, gt=0.0)
    phi_refresh_epochs: int = Field(1, gt=0)
    accuracy_budget: float = Field(0.03, ge=0.0)
    enforce_feature_gap: bool = True


class TrainingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(64, gt=0)
    epochs: int = Field(10, gt=0)
    patience: int = Field(3, gt=0)

    def sgd(self, seed: int) -> SgdConfig:
        return SgdConfig(seed=seed, **self.model_dump())


class TransferSection(TrainingSection):
    frozen_layers: int = Field(3, ge=0)  # K
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)

    def sgd(self, seed: int) -> SgdConfig:
        return SgdConfig(seed=seed, **self.model_dump(exclude={"frozen_layers", "validation_fraction"}))


class TriggerSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(500, gt=0)
    rate: float = Field(0.1, gt=0.0)
    batch_size: int = Field(64, gt=0)
    min_reduction: float = Field(0.5, ge=0.0, lt=1.0)
    monitor_size: int = Field(256, gt=0)
    eval_every: int = Field(25, gt=0)
    init: Literal["optimized", "random"] = "optimized"


class DefenseSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prune_layer: Optional[int] = Field(None, ge=1)  # default: first FC layer
    prune_fractions: List[float] = [round(0.05 * i, 2) for i in range(20)]
    blur_kernels: List[int] = [1, 3, 5, 7, 9]
    blur_sigma_ratio: float = Field(1.0 / 3.0, gt=0.0)
    tuning_frozen_counts: List[int] = [0, 1, 2, 3]

    @field_validator("prune_fractions", "blur_kernels", "tuning_frozen_counts", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)


class ExperimentConfig(BaseModel):
    """Everything one experiment needs; one INI section per field."""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection = ExperimentSection()
    data: DataSection = DataSection()
    attack: AttackSection = AttackSection()
    teacher_training: TrainingSection = TrainingSection()
    injection: TrainingSection = TrainingSection()
    transfer: TransferSection = TransferSection()
    trigger: TriggerSection = TriggerSection()
    defense: DefenseSection = DefenseSection()

    @model_validator(mode="after")
    def flag_shallow_freeze(self) -> "ExperimentConfig":
        if self.transfer.frozen_layers < self.attack.inject_layer:
            logger.warning(
                f"Config {self.experiment.name}: K={self.transfer.frozen_layers} < K_t={self.attack.inject_layer}, "
                f"the latent backdoor is not expected to survive transfer"
            )
        return self


class BundleCheck(BaseModel):
    """One measured quantity compared with a reference value."""

    metric: str
    op: Literal["ge", "le", "lt", "gt"]
    threshold: float
    reference: Optional[str] = None  # expected value shown next to the measurement


class BundleDefinition(BaseModel):
    description: str
    runs: int = Field(1, ge=1)
    overrides: Dict[str, Dict[str, str]] = {}
    params: Dict[str, List[float]] = {}
    checks: List[BundleCheck] = []
    aliases: List[str] = []


class CheckOutcome(BaseModel):
    metric: str
    measured: Optional[float]
    op: str
    threshold: float
    reference: Optional[str] = None
    passed: bool


class BundleReport(BaseModel):
    bundle: str
    description: str
    synthetic_fallback: bool
    outcomes: List[CheckOutcome]
    findings: List[str] = []
    measurements: Dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)
