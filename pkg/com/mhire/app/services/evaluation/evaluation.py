import logging
from pathlib import Path
from typing import Callable, List, Sequence, Union

import numpy as np
import pandas as pd

from com.mhire.app.config.errors import ArtifactIOError, InputError
from com.mhire.app.services.datasets.datasets_schema import LabeledDataset
from com.mhire.app.services.evaluation.evaluation_schema import AggregateMetrics, MetricsRecord
from com.mhire.app.services.latent_attack.latent_attack import apply_trigger
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerSpec
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["experiment_id", "run", "seed", "sweep_param", "attack_success_rate", "clean_accuracy",
                  "eval_count", "test_count"]
EVAL_CHUNK = 1024

Images = Union[LabeledDataset, np.ndarray]


def _images(data: Images) -> np.ndarray:
    return data.images if isinstance(data, LabeledDataset) else data


def attack_success_rate(student: ModelGraph, trigger: TriggerSpec, x_eval: Images, target_index: int) -> float:
    """Fraction of triggered evaluation inputs the student classifies as `target_index`."""
    images = _images(x_eval)
    if images.shape[0] == 0:
        raise InputError("empty-dataset", "X_eval is empty")
    if not 0 <= target_index < student.class_count:
        raise InputError("label-out-of-range", f"target {target_index} outside {student.class_count} classes")
    hits = 0
    for start in range(0, images.shape[0], EVAL_CHUNK):
        poisoned = apply_trigger(images[start:start + EVAL_CHUNK], trigger)
        hits += int((student.predict(poisoned) == target_index).sum())
    return hits / images.shape[0]


def clean_accuracy(model: ModelGraph, test: LabeledDataset) -> float:
    """Top-1 accuracy on clean inputs."""
    if test.labels.max() >= model.class_count:
        raise InputError("label-out-of-range", f"labels reach {test.labels.max()}, model has {model.class_count} classes")
    return float(np.mean(model.predict(test.images) == test.labels))


def poisoned_test_success_rate(student: ModelGraph, trigger: TriggerSpec, student_test: LabeledDataset,
                               target_index: int) -> float:
    """Success rate on triggered student-test data, leaving out samples that already belong to the target."""
    keep = student_test.labels != target_index
    return attack_success_rate(student, trigger, student_test.images[keep], target_index)


def measure(
    student: ModelGraph,
    trigger: TriggerSpec,
    x_eval: LabeledDataset,
    student_test: LabeledDataset,
    target_index: int,
    seed: int,
    experiment_id: str,
    run: int = 0,
    sweep_param=None,
) -> MetricsRecord:
    return MetricsRecord(
        attack_success_rate=attack_success_rate(student, trigger, x_eval, target_index),
        clean_accuracy=clean_accuracy(student, student_test),
        eval_count=len(x_eval),
        test_count=len(student_test),
        seed=seed,
        experiment_id=experiment_id,
        run=run,
        sweep_param=sweep_param,
    )


def derive_seed(base_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([base_seed, run]).generate_state(1)[0])


def aggregate(records: Sequence[MetricsRecord], experiment_id: str, base_seed: int) -> AggregateMetrics:
    asr = np.array([r.attack_success_rate for r in records])
    acc = np.array([r.clean_accuracy for r in records])
    return AggregateMetrics(
        experiment_id=experiment_id,
        runs=len(records),
        base_seed=base_seed,
        mean_attack_success_rate=float(asr.mean()),
        min_attack_success_rate=float(asr.min()),
        max_attack_success_rate=float(asr.max()),
        mean_clean_accuracy=float(acc.mean()),
        min_clean_accuracy=float(acc.min()),
        max_clean_accuracy=float(acc.max()),
        records=list(records),
    )


def run_repeated(
    experiment: Callable[[int, int], MetricsRecord], runs: int, base_seed: int, experiment_id: str
) -> AggregateMetrics:
    """Run `experiment(seed, run)` `runs` times with seeds derived from `base_seed`; report mean/min/max."""
    if runs < 1:
        raise InputError("invalid-runs", f"runs must be >= 1, got {runs}")
    records: List[MetricsRecord] = []
    for run in range(runs):
        seed = derive_seed(base_seed, run)
        record = experiment(seed, run)
        logger.info(f"{experiment_id} run {run + 1}/{runs} (seed {seed}): "
                    f"success={record.attack_success_rate:.4f} accuracy={record.clean_accuracy:.4f}")
        records.append(record)
    return aggregate(records, experiment_id, base_seed)


def records_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records], columns=METRIC_COLUMNS)


def write_metrics_csv(records: Sequence[MetricsRecord], path: Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        records_frame(records).to_csv(path, index=False)
    except OSError as e:
        logger.error(f"Error writing metrics {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")


def aggregate_from_csv(path: Path, experiment_id: str, base_seed: int) -> AggregateMetrics:
    frame = pd.read_csv(path)
    frame["sweep_param"] = frame["sweep_param"].astype(object).where(frame["sweep_param"].notna(), None)
    records = [MetricsRecord(**row) for row in frame.to_dict(orient="records")]
    return aggregate(records, experiment_id, base_seed)


def write_summary_json(summary: AggregateMetrics, path: Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(summary.model_dump_json(indent=2))
    except OSError as e:
        logger.error(f"Error writing summary {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")
