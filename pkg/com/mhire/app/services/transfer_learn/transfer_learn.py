"""
Student side of transfer learning: copy the first N-1 teacher layers, add
a fresh classification layer, freeze the first K layers and fine-tune the
rest. When K >= K_t this carries a latent backdoor into the student.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from com.mhire.app.config.errors import InputError
from com.mhire.app.services.datasets.datasets_schema import LabeledDataset
from com.mhire.app.services.evaluation.evaluation import attack_success_rate
from com.mhire.app.services.latent_attack.latent_attack import apply_trigger, feature_target, mean_feature_gap
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerSpec
from com.mhire.app.services.model_zoo.model_trainer import TrainingHistory, fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph, layer_bytes, replace_classification_layer
from com.mhire.app.services.transfer_learn.transfer_learn_schema import LiveBackdoorReport, TransferConfig

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHECK_SAMPLES = 256


def build_student(teacher: ModelGraph, config: TransferConfig) -> ModelGraph:
    if not 0 <= config.frozen_layers <= teacher.N - 1:
        raise InputError("invalid-K", f"K={config.frozen_layers} outside 0..{teacher.N - 1}")
    student = replace_classification_layer(teacher.clone(), config.student_class_count, seed=config.seed)
    student = student.with_frozen(config.frozen_layers)
    student.name = f"{teacher.name}-student"
    student.metadata["teacher"] = teacher.name
    student.metadata["frozen_layers"] = config.frozen_layers
    logger.info(f"Built student from {teacher.name}: {config.student_class_count} classes, "
                f"layers 1..{config.frozen_layers} frozen")
    return student


def _holdout(dataset: LabeledDataset, fraction: float, seed: int) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    held = int(len(dataset) * fraction)
    if held == 0 or held == len(dataset):
        return dataset, None
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(order[held:])), dataset.subset(np.sort(order[:held]))


def fine_tune(student: ModelGraph, x_student: LabeledDataset, config: TransferConfig) -> Tuple[ModelGraph, TrainingHistory]:
    """Train the unfrozen layers on X_student, early stopping on a held-out slice."""
    if x_student.labels.max() >= student.class_count:
        raise InputError("label-out-of-range", f"student data has labels >= {student.class_count}")
    train, validation = _holdout(x_student, config.validation_fraction, config.training.seed)
    tuned, history = fit_classifier(
        student,
        train.images,
        train.labels,
        config.training,
        stage="transfer",
        validation=None if validation is None else (validation.images, validation.labels),
    )
    accuracy = history.validation_accuracies[history.best_epoch] if history.validation_accuracies else None
    if accuracy is not None:
        logger.info(f"Student fine-tuned: best epoch {history.best_epoch + 1}, hold-out accuracy {accuracy:.4f}")
    return tuned, history


def transfer(teacher: ModelGraph, x_student: LabeledDataset, config: TransferConfig) -> Tuple[ModelGraph, TrainingHistory]:
    return fine_tune(build_student(teacher, config), x_student, config)


def frozen_prefix(model: ModelGraph) -> int:
    """Largest k with layers 1..k all frozen."""
    k = 0
    for index in model.layer_indices():
        if not model.is_frozen(index):
            break
        k = index
    return k


def verify_live_backdoor(
    teacher: ModelGraph,
    student: ModelGraph,
    trigger: TriggerSpec,
    x_eval: LabeledDataset,
    x_target: LabeledDataset,
    target_index: int,
) -> LiveBackdoorReport:
    """
    Check the live-backdoor argument on concrete weights: with K >= K_t the
    first K_t layers are shared byte for byte, so poisoned features and
    their gap to φ are identical in teacher and student. A violated
    hypothesis (K < K_t) is reported, not raised.
    """
    k_t = trigger.inject_layer
    if not 1 <= k_t <= teacher.N - 1:
        raise InputError("index-out-of-range", f"K_t={k_t} must lie in 1..{teacher.N - 1} to survive transfer")
    frozen = frozen_prefix(student)
    findings = []
    hypothesis = frozen >= k_t
    if not hypothesis:
        findings.append("hypothesis-violated")
        logger.warning(f"Only {frozen} layers frozen but K_t={k_t}: backdoor is expected to be wiped out")

    mismatched = [i for i in range(1, k_t + 1) if layer_bytes(teacher, i) != layer_bytes(student, i)]
    sample = x_eval.images[:CHECK_SAMPLES]
    poisoned = apply_trigger(sample, trigger)
    features_identical = bool(np.array_equal(teacher.feature_at(k_t, poisoned), student.feature_at(k_t, poisoned)))
    teacher_gap = mean_feature_gap(teacher, trigger, sample, feature_target(teacher, k_t, x_target).phi)
    student_gap = mean_feature_gap(student, trigger, sample, feature_target(student, k_t, x_target).phi)
    if mismatched:
        findings.append("prefix-differs")
    if not features_identical:
        findings.append("features-differ")
    success = attack_success_rate(student, trigger, x_eval, target_index)

    report = LiveBackdoorReport(
        inject_layer=k_t,
        frozen_layers=frozen,
        hypothesis_holds=hypothesis,
        mismatched_layers=mismatched,
        prefix_identical=not mismatched,
        features_identical=features_identical,
        teacher_gap=teacher_gap,
        student_gap=student_gap,
        gaps_equal=teacher_gap == student_gap,
        attack_success_rate=success,
        findings=findings,
    )
    logger.info(f"Live-backdoor check K_t={k_t} K={frozen}: prefix identical={report.prefix_identical}, "
                f"gap teacher={teacher_gap:.6f} student={student_gap:.6f}, success={success:.4f}")
    return report
