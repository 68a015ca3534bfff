from typing import List

import pandas as pd
from pydantic import BaseModel, model_validator

from com.mhire.app.config.errors import InputError
from com.mhire.app.services.evaluation.evaluation_schema import MetricsRecord

SWEEP_COLUMNS = ["sweep_param", "attack_success_rate", "clean_accuracy", "seed"]


class DefenseSweepResult(BaseModel):
    defense: str  # fine-prune | blur | multilayer
    parameter: str  # pruning fraction | kernel size | frozen layer count
    points: List[MetricsRecord]
    baseline_success: float
    baseline_accuracy: float
    findings: List[str] = []

    @model_validator(mode="after")
    def check_order(self) -> "DefenseSweepResult":
        params = [p.sweep_param for p in self.points]
        if any(p is None for p in params) or params != sorted(params):
            raise InputError("unordered-sweep", f"{self.defense} points must be ordered by {self.parameter}")
        return self

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([p.model_dump() for p in self.points], columns=SWEEP_COLUMNS)
