import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from com.mhire.app.config.errors import ArtifactIOError, InputError
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.datasets.datasets_schema import LabeledDataset
from com.mhire.app.services.defenses.defenses_schema import DefenseSweepResult
from com.mhire.app.services.evaluation.evaluation import attack_success_rate, clean_accuracy
from com.mhire.app.services.evaluation.evaluation_schema import MetricsRecord
from com.mhire.app.services.latent_attack.latent_attack import apply_trigger
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerSpec
from com.mhire.app.services.model_zoo.model_trainer import fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph
from com.mhire.app.services.model_zoo.model_zoo_schema import LayerKind
from com.mhire.app.services.transfer_learn.transfer_learn import transfer
from com.mhire.app.services.transfer_learn.transfer_learn_schema import TransferConfig

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_PRUNE_FRACTIONS = [round(0.05 * i, 2) for i in range(20)]
DEFAULT_BLUR_KERNELS = [1, 3, 5, 7, 9]
SUCCESS_THRESHOLD = 0.20
ACCURACY_LOSS = 0.20
NOISE_BAND = 0.05
BLUR_CHUNK = 256

P = TypeVar("P")


def _sweep(params: Sequence[P], point: Callable[[P], MetricsRecord], workers: int) -> List[MetricsRecord]:
    """Evaluate independent sweep points, in parameter order, on up to `workers` threads."""
    if workers <= 1:
        return [point(p) for p in params]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(point, params))


def first_fc_layer(model: ModelGraph) -> int:
    return next(s.index for s in model.layers if s.kind == LayerKind.FULLY_CONNECTED)


def unit_activity(model: ModelGraph, layer: int, images: np.ndarray) -> np.ndarray:
    """Mean absolute post-activation output per unit (per channel for conv layers)."""
    features = np.abs(model.feature_at(layer, images))
    axes = (0,) if features.ndim == 2 else (0, 2, 3)
    return features.mean(axis=axes)


def prune_units(model: ModelGraph, fraction: float, images: np.ndarray, layer: Optional[int] = None) -> ModelGraph:
    """Mask the `fraction` least active units of `layer` (default: first FC layer)."""
    if not 0.0 <= fraction <= 1.0:
        raise InputError("fraction-out-of-range", f"pruning fraction must be in [0, 1], got {fraction}")
    layer = first_fc_layer(model) if layer is None else layer
    if not 1 <= layer < model.N:
        raise InputError("index-out-of-range", f"can only prune layers 1..{model.N - 1}, got {layer}")
    activity = unit_activity(model, layer, images)
    count = int(round(fraction * activity.size))
    mask = model.unit_masks.get(layer, np.ones(activity.size)).copy()
    mask[np.argsort(activity, kind="stable")[:count]] = 0.0
    masks = dict(model.unit_masks)
    masks[layer] = mask
    pruned = ModelGraph(model.name, model.input_shape, model.layers, model.params, masks, model.metadata).with_params({})
    logger.info(f"Pruned {int((mask == 0).sum())}/{mask.size} units of layer {layer}")
    return pruned


def fine_prune(
    student: ModelGraph,
    fraction: float,
    x_clean: LabeledDataset,
    config: SgdConfig,
    layer: Optional[int] = None,
) -> ModelGraph:
    """Prune the least active units, then fine-tune the unfrozen layers on clean data. Pruned units stay zero."""
    if not 0.0 <= fraction <= 1.0:
        raise InputError("fraction-out-of-range", f"pruning fraction must be in [0, 1], got {fraction}")
    if fraction == 0.0:
        return student
    pruned = prune_units(student, fraction, x_clean.images, layer)
    tuned, _ = fit_classifier(pruned, x_clean.images, x_clean.labels, config, stage="fine-prune")
    return tuned


def pruning_findings(result: DefenseSweepResult, success_threshold: float = SUCCESS_THRESHOLD,
                     accuracy_loss: float = ACCURACY_LOSS) -> List[str]:
    """Flag points where pruning removes the backdoor without the expected heavy accuracy loss."""
    findings = []
    for p in result.points:
        if p.attack_success_rate < success_threshold and result.baseline_accuracy - p.clean_accuracy < accuracy_loss:
            findings.append(
                f"cheap-removal at fraction {p.sweep_param:.2f}: success {p.attack_success_rate:.3f}, "
                f"accuracy loss {result.baseline_accuracy - p.clean_accuracy:.3f}"
            )
    return findings


def fine_prune_sweep(
    student: ModelGraph,
    trigger: TriggerSpec,
    x_clean: LabeledDataset,
    x_eval: LabeledDataset,
    student_test: LabeledDataset,
    target_index: int,
    config: SgdConfig,
    fractions: Sequence[float] = DEFAULT_PRUNE_FRACTIONS,
    layer: Optional[int] = None,
    experiment_id: str = "fine-prune",
    workers: int = 1,
) -> DefenseSweepResult:
    baseline_success = attack_success_rate(student, trigger, x_eval, target_index)
    baseline_accuracy = clean_accuracy(student, student_test)

    def point(fraction: float) -> MetricsRecord:
        defended = fine_prune(student.clone(), fraction, x_clean, config, layer)
        record = _record(defended, trigger, x_eval, student_test, target_index, config.seed, experiment_id, fraction)
        logger.info(f"Fine-prune {fraction:.2f}: success={record.attack_success_rate:.4f} "
                    f"accuracy={record.clean_accuracy:.4f}")
        return record

    result = DefenseSweepResult(
        defense="fine-prune",
        parameter="pruning_fraction",
        points=_sweep(sorted(fractions), point, workers),
        baseline_success=baseline_success,
        baseline_accuracy=baseline_accuracy,
    )
    result.findings = pruning_findings(result)
    for finding in result.findings:
        logger.warning(f"Fine-prune curve: {finding}")
    return result


def gaussian_kernel(kernel_size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Normalized 2-D Gaussian; sigma defaults to kernel_size / 3."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InputError("even-kernel-size", f"kernel size must be odd and positive, got {kernel_size}")
    sigma = kernel_size / 3.0 if sigma is None else sigma
    if sigma <= 0.0:
        raise InputError("invalid-sigma", f"sigma must be positive, got {sigma}")
    r = (kernel_size - 1) // 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    kernel = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_blur(x: np.ndarray, kernel_size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Per-channel Gaussian blur with reflect padding, for one [c, h, w] image or a [n, c, h, w] batch."""
    kernel = gaussian_kernel(kernel_size, sigma)
    if x.ndim not in (3, 4):
        raise InputError("shape-mismatch", f"expected [c, h, w] or [n, c, h, w], got {x.shape}")
    if kernel_size == 1:
        return x.copy()
    r = kernel_size // 2
    if r >= min(x.shape[-2:]):
        raise InputError("kernel-too-large", f"kernel {kernel_size} needs images larger than {x.shape[-2:]}")
    batch = x if x.ndim == 4 else x[None]
    blurred = np.empty_like(batch)
    for start in range(0, batch.shape[0], BLUR_CHUNK):
        chunk = np.pad(batch[start:start + BLUR_CHUNK], [(0, 0), (0, 0), (r, r), (r, r)], mode="reflect")
        windows = sliding_window_view(chunk, (kernel_size, kernel_size), axis=(-2, -1))
        blurred[start:start + BLUR_CHUNK] = np.tensordot(windows, kernel, axes=((-2, -1), (0, 1)))
    return blurred if x.ndim == 4 else blurred[0]


def _record(model: ModelGraph, trigger: TriggerSpec, x_eval: LabeledDataset, student_test: LabeledDataset,
            target_index: int, seed: int, experiment_id: str, param: float) -> MetricsRecord:
    return MetricsRecord(
        attack_success_rate=attack_success_rate(model, trigger, x_eval, target_index),
        clean_accuracy=clean_accuracy(model, student_test),
        eval_count=len(x_eval),
        test_count=len(student_test),
        seed=seed,
        experiment_id=experiment_id,
        sweep_param=param,
    )


def blurred_metrics(student: ModelGraph, trigger: TriggerSpec, x_eval: LabeledDataset, student_test: LabeledDataset,
                    target_index: int, kernel_size: int, sigma: Optional[float] = None) -> Tuple[float, float]:
    poisoned = gaussian_blur(apply_trigger(x_eval.images, trigger), kernel_size, sigma)
    success = float(np.mean(student.predict(poisoned) == target_index))
    accuracy = float(np.mean(student.predict(gaussian_blur(student_test.images, kernel_size, sigma)) == student_test.labels))
    return success, accuracy


def blur_defense_sweep(
    student: ModelGraph,
    trigger: TriggerSpec,
    x_eval: LabeledDataset,
    student_test: LabeledDataset,
    target_index: int,
    kernel_sizes: Sequence[int] = DEFAULT_BLUR_KERNELS,
    sigma_ratio: float = 1.0 / 3.0,
    seed: int = 0,
    experiment_id: str = "blur",
    workers: int = 1,
) -> DefenseSweepResult:
    """Blur every input before the student sees it; sigma = sigma_ratio * kernel size."""
    if not 0 <= target_index < student.class_count:
        raise InputError("label-out-of-range", f"target {target_index} outside {student.class_count} classes")

    def point(kernel_size: int) -> MetricsRecord:
        success, accuracy = blurred_metrics(student, trigger, x_eval, student_test, target_index, kernel_size,
                                            sigma_ratio * kernel_size)
        logger.info(f"Blur kernel {kernel_size}: success={success:.4f} accuracy={accuracy:.4f}")
        return MetricsRecord(
            attack_success_rate=success,
            clean_accuracy=accuracy,
            eval_count=len(x_eval),
            test_count=len(student_test),
            seed=seed,
            experiment_id=experiment_id,
            sweep_param=float(kernel_size),
        )

    result = DefenseSweepResult(
        defense="blur",
        parameter="kernel_size",
        points=_sweep(sorted(kernel_sizes), point, workers),
        baseline_success=attack_success_rate(student, trigger, x_eval, target_index),
        baseline_accuracy=clean_accuracy(student, student_test),
    )
    lowest = np.inf
    for p in result.points:
        if p.attack_success_rate > lowest + NOISE_BAND:
            result.findings.append(f"success rises at kernel {int(p.sweep_param)}: {p.attack_success_rate:.3f}")
        lowest = min(lowest, p.attack_success_rate)
    return result


def multilayer_tuning_sweep(
    teacher: ModelGraph,
    x_student: LabeledDataset,
    trigger: TriggerSpec,
    x_eval: LabeledDataset,
    student_test: LabeledDataset,
    target_index: int,
    frozen_counts: Sequence[int],
    config: TransferConfig,
    experiment_id: str = "multilayer",
    workers: int = 1,
) -> DefenseSweepResult:
    """Re-run transfer with each frozen count K' and measure what survives."""
    for k in frozen_counts:
        if not 0 <= k <= teacher.N - 1:
            raise InputError("invalid-K", f"frozen count {k} outside 0..{teacher.N - 1}")

    def point(k: int) -> MetricsRecord:
        student, _ = transfer(teacher.clone(), x_student, config.model_copy(update={"frozen_layers": k}))
        record = _record(student, trigger, x_eval, student_test, target_index, config.training.seed, experiment_id,
                         float(k))
        logger.info(f"Tuning with {k} frozen layers: success={record.attack_success_rate:.4f} "
                    f"accuracy={record.clean_accuracy:.4f}")
        return record

    default_k = config.frozen_layers
    baseline_student, _ = transfer(teacher.clone(), x_student, config)
    result = DefenseSweepResult(
        defense="multilayer",
        parameter="frozen_layers",
        points=_sweep(sorted(frozen_counts), point, workers),
        baseline_success=attack_success_rate(baseline_student, trigger, x_eval, target_index),
        baseline_accuracy=clean_accuracy(baseline_student, student_test),
    )
    for p in result.points:
        if p.sweep_param < trigger.inject_layer and p.attack_success_rate > NOISE_BAND:
            result.findings.append(f"backdoor survived tuning from layer {int(p.sweep_param) + 1} "
                                   f"(K_t={trigger.inject_layer}, default K={default_k})")
    return result


def write_sweep_csv(result: DefenseSweepResult, path: Path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        result.frame().to_csv(path, index=False)
    except OSError as e:
        logger.error(f"Error writing sweep {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")
