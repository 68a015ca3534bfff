from typing import List

from pydantic import BaseModel, Field

from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig


class TransferConfig(BaseModel):
    frozen_layers: int = Field(..., ge=0)  # K
    student_class_count: int = Field(..., ge=2)
    training: SgdConfig = SgdConfig()
    # share of X_student held out for early stopping; 0 disables the hold-out
    validation_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seed: int = 1


class LiveBackdoorReport(BaseModel):
    """Structural check that a backdoor injected at K_t survives transfer with K frozen layers."""

    inject_layer: int
    frozen_layers: int
    hypothesis_holds: bool
    mismatched_layers: List[int] = []
    prefix_identical: bool
    features_identical: bool
    teacher_gap: float
    student_gap: float
    gaps_equal: bool
    attack_success_rate: float
    findings: List[str] = []
