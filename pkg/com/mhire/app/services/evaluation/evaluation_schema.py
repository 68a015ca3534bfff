from typing import List, Optional

from pydantic import BaseModel, Field


class MetricsRecord(BaseModel):
    attack_success_rate: float = Field(..., ge=0.0, le=1.0)
    clean_accuracy: float = Field(..., ge=0.0, le=1.0)
    eval_count: int = Field(..., gt=0)
    test_count: int = Field(..., gt=0)
    seed: int
    experiment_id: str
    run: int = 0
    sweep_param: Optional[float] = None


class AggregateMetrics(BaseModel):
    experiment_id: str
    runs: int
    base_seed: int
    mean_attack_success_rate: float
    min_attack_success_rate: float
    max_attack_success_rate: float
    mean_clean_accuracy: float
    min_clean_accuracy: float
    max_clean_accuracy: float
    records: List[MetricsRecord]
