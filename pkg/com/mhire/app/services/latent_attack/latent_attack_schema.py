from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from com.mhire.app.config.errors import InputError
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.model_zoo.model_trainer import TrainingHistory


class TriggerSpec(BaseModel):
    """A latent trigger (m, Δ) recorded against injection layer K_t."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mask: np.ndarray  # binary, image-shaped [c, h, w]
    pattern: np.ndarray  # image-shaped, values in [0, 1]
    inject_layer: int = Field(..., ge=1)
    target_label: Optional[int] = None
    target_name: str = ""
    seed: int = 0

    @model_validator(mode="after")
    def check_invariants(self) -> "TriggerSpec":
        if self.mask.shape != self.pattern.shape:
            raise InputError("shape-mismatch", f"mask {self.mask.shape} vs pattern {self.pattern.shape}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise InputError("non-binary-mask", "mask entries must be exactly 0 or 1")
        if self.pattern.min() < 0.0 or self.pattern.max() > 1.0:
            raise InputError("pattern-range", "pattern values must lie in [0, 1]")
        return self

    @property
    def mask_fraction(self) -> float:
        return float(self.mask[0].mean())


class FeatureTarget(BaseModel):
    """φ: the representative K_t feature of the target class (the mean under MSE)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    phi: np.ndarray
    inject_layer: int


class TriggerConfig(BaseModel):
    steps: int = Field(500, gt=0)
    # Adam step size in pixel units, decayed linearly to a tenth
    rate: float = Field(0.1, gt=0.0)
    batch_size: int = Field(64, gt=0)
    # required relative drop of the pairwise trigger objective on the monitor subset
    min_reduction: float = Field(0.5, ge=0.0, lt=1.0)
    monitor_size: int = Field(256, gt=0)
    eval_every: int = Field(25, gt=0)
    seed: int = 0


class InjectionConfig(BaseModel):
    lambda_: float = Field(1.0, ge=0.0, alias="lambda")
    training: SgdConfig = SgdConfig()
    trigger: TriggerConfig = TriggerConfig()
    phi_refresh_epochs: int = Field(1, gt=0)
    # ε_feat as a fraction of the clean-to-φ baseline gap
    eps_feat_ratio: float = Field(0.1, gt=0.0)
    accuracy_budget: float = Field(0.03, ge=0.0)
    enforce_feature_gap: bool = True

    model_config = ConfigDict(populate_by_name=True)


class TriggerReport(BaseModel):
    initial_objective: float
    final_objective: float
    reduction: float
    steps: int


class InjectionReport(BaseModel):
    inject_layer: int
    lambda_: float
    baseline_gaps: List[float]
    eps_feat: List[float]
    epoch_gaps: List[List[float]] = []
    final_gaps: List[float]
    accuracy_before: float
    accuracy_after: float
    history: TrainingHistory
    triggers: List[TriggerReport] = []

    @property
    def accuracy_drop(self) -> float:
        return self.accuracy_before - self.accuracy_after


class InfectionReport(BaseModel):
    retrain_history: TrainingHistory
    retrain_target_accuracy: float
    injection: InjectionReport
    teacher_classes: int
    infected_classes_before_wipe: int
    wiped_classes: int
    stage_timings: Dict[str, float] = {}


class TriggerHeader(BaseModel):
    image_shape: List[int]
    inject_layer: int
    target_label: Optional[int]
    target_name: str
    seed: int
