"""
Teacher-side latent backdoor: retrain with the target class, optimize a
trigger against the target's K_t features, inject the trigger->feature
association into the first K_t layers, then restore the original head.
"""
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from com.mhire.app.config.errors import ConvergenceError, InputError, LatentBackdoorError
from com.mhire.app.services.autodiff.autodiff import (
    Tensor,
    add,
    backward,
    mse,
    mul,
    softmax_cross_entropy,
)
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.datasets.datasets_schema import LabeledDataset
from com.mhire.app.services.latent_attack.latent_attack_schema import (
    FeatureTarget,
    InfectionReport,
    InjectionConfig,
    InjectionReport,
    TriggerConfig,
    TriggerReport,
    TriggerSpec,
)
from com.mhire.app.services.model_zoo.model_trainer import StepResult, TrainingHistory, fit, fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import (
    HeadSnapshot,
    ModelGraph,
    forward,
    replace_classification_layer,
    restore_head,
    snapshot_head,
)

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

FEATURE_BATCH = 256


def default_mask(image_shape: Sequence[int], area_fraction: float = 0.04) -> np.ndarray:
    """Square in the bottom-right corner covering about `area_fraction` of the image, all channels."""
    c, h, w = image_shape
    side = max(1, int(round(np.sqrt(area_fraction * h * w))))
    mask = np.zeros((c, h, w), dtype=np.float64)
    mask[:, h - side:, w - side:] = 1.0
    return mask


def check_mask(mask: np.ndarray) -> None:
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise InputError("non-binary-mask", "mask entries must be exactly 0 or 1")
    if not mask.any():
        raise InputError("mask-empty", "mask selects no pixels")


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """A(x, m, Δ) = (1 - m) ∘ x + m ∘ Δ, for one image or a batch."""
    image_shape = x.shape[-3:] if x.ndim == 4 else x.shape
    if x.ndim not in (3, 4) or tuple(image_shape) != trigger.mask.shape:
        raise InputError("shape-mismatch", f"input {x.shape} vs trigger {trigger.mask.shape}")
    return (1.0 - trigger.mask) * x + trigger.mask * trigger.pattern


def _stamp(x: np.ndarray, mask: np.ndarray, pattern: Tensor) -> Tensor:
    """Graph version of the trigger formula with Δ as a differentiable leaf."""
    return add(Tensor((1.0 - mask)[None] * x), mul(Tensor(mask[None]), pattern))


def random_trigger(mask: np.ndarray, inject_layer: int, seed: int, target_label: Optional[int] = None) -> TriggerSpec:
    check_mask(mask)
    rng = np.random.default_rng(seed)
    pattern = rng.uniform(0.0, 1.0, size=mask.shape) * mask
    return TriggerSpec(mask=mask, pattern=pattern, inject_layer=inject_layer, target_label=target_label, seed=seed)


def _features(model: ModelGraph, k: int, images: np.ndarray) -> np.ndarray:
    return model.feature_at(k, images).reshape(images.shape[0], -1)


def feature_target(model: ModelGraph, inject_layer: int, x_target: LabeledDataset) -> FeatureTarget:
    """argmin_φ Σ_t MSE(φ, F^{K_t}(x_t)), which is the elementwise mean of the target features."""
    features = model.feature_at(inject_layer, x_target.images)
    return FeatureTarget(phi=features.mean(axis=0), inject_layer=inject_layer)


def trigger_objective(model: ModelGraph, trigger: TriggerSpec, images: np.ndarray, target_images: np.ndarray) -> float:
    """Σ_x Σ_{x_t} D(F^{K_t}(A(x)), F^{K_t}(x_t)) with D = MSE, summed pair by pair."""
    k = trigger.inject_layer
    targets = _features(model, k, target_images)
    total = 0.0
    for start in range(0, images.shape[0], FEATURE_BATCH):
        poisoned = _features(model, k, apply_trigger(images[start:start + FEATURE_BATCH], trigger))
        diff = poisoned[:, None, :] - targets[None, :, :]
        total += float(np.mean(diff * diff, axis=2).sum())
    return total


def mean_feature_gap(model: ModelGraph, trigger: TriggerSpec, images: np.ndarray, phi: np.ndarray) -> float:
    """Mean over x of D(F^{K_t}(A(x)), φ)."""
    return _mean_gap(model, trigger.inject_layer, images, phi, trigger)


def mean_clean_gap(model: ModelGraph, inject_layer: int, images: np.ndarray, phi: np.ndarray) -> float:
    return _mean_gap(model, inject_layer, images, phi, None)


def _mean_gap(model: ModelGraph, k: int, images: np.ndarray, phi: np.ndarray,
              trigger: Optional[TriggerSpec]) -> float:
    total = 0.0
    for start in range(0, images.shape[0], FEATURE_BATCH):
        chunk = images[start:start + FEATURE_BATCH]
        if trigger is not None:
            chunk = apply_trigger(chunk, trigger)
        diff = _features(model, k, chunk) - phi.reshape(1, -1)
        total += float(np.mean(diff * diff, axis=1).sum())
    return total / images.shape[0]


@dataclass
class _Adam:
    """Per-pixel Adam moments for Δ."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def step(self, value: np.ndarray, grad: np.ndarray, rate: float) -> np.ndarray:
        if self.m is None:
            self.m, self.v = np.zeros_like(grad), np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return value - rate * m_hat / (np.sqrt(v_hat) + self.eps)


def generate_trigger(
    model: ModelGraph,
    mask: np.ndarray,
    inject_layer: int,
    x_target: LabeledDataset,
    x_nontarget: LabeledDataset,
    config: TriggerConfig,
    target_label: Optional[int] = None,
) -> Tuple[TriggerSpec, TriggerReport]:
    """
    Optimize Δ so poisoned inputs from X_nontarget ∪ X_target land on the
    target's K_t features. The model's weights are read, never written.

    Minibatch steps descend the mean of D(F^{K_t}(A(x)), φ), which has the
    same minimizer as the pairwise sum. Progress and the required drop are
    measured on the pairwise sum itself over a fixed monitor subset.
    """
    check_mask(mask)
    if not 1 <= inject_layer <= model.N:
        raise InputError("index-out-of-range", f"K_t={inject_layer} outside 1..{model.N}")
    if mask.shape != model.input_shape:
        raise InputError("shape-mismatch", f"mask {mask.shape} vs model input {model.input_shape}")
    rng = np.random.default_rng(config.seed)
    pool = np.concatenate([x_nontarget.images, x_target.images], axis=0)
    monitor = pool[np.sort(rng.choice(pool.shape[0], size=min(config.monitor_size, pool.shape[0]), replace=False))]
    phi = feature_target(model, inject_layer, x_target).phi

    def objective(pattern: np.ndarray) -> float:
        candidate = TriggerSpec(mask=mask, pattern=pattern, inject_layer=inject_layer)
        return trigger_objective(model, candidate, monitor, x_target.images)

    pattern = rng.uniform(0.0, 1.0, size=mask.shape) * mask
    initial = best = objective(pattern)
    best_pattern = pattern
    adam = _Adam()
    logger.info(f"Trigger generation at K_t={inject_layer}: initial objective {initial:.6f}")

    for step in range(config.steps):
        idx = rng.choice(pool.shape[0], size=min(config.batch_size, pool.shape[0]), replace=False)
        delta = Tensor(pattern[None], requires_grad=True, name="pattern")
        result = model.forward_pass(_stamp(pool[idx], mask, delta), upto=inject_layer)
        target = Tensor(np.broadcast_to(phi, result.output.shape))
        grads = backward(mse(result.output, target))
        rate = config.rate * (1.0 - 0.9 * step / config.steps)
        pattern = np.clip(adam.step(pattern, grads[delta][0] * mask, rate), 0.0, 1.0) * mask
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            value = objective(pattern)
            if value < best:
                best, best_pattern = value, pattern.copy()
            logger.info(f"Trigger step {step + 1}/{config.steps}: objective {value:.6f} (best {best:.6f})")

    reduction = 1.0 - best / initial if initial > 0 else 0.0
    report = TriggerReport(initial_objective=initial, final_objective=best, reduction=reduction, steps=config.steps)
    if reduction < config.min_reduction:
        logger.error(f"Error generating trigger: objective reduced by {reduction:.1%}, need {config.min_reduction:.0%}")
        raise ConvergenceError(
            "objective-not-decreasing", f"trigger objective fell by {reduction:.1%} (< {config.min_reduction:.0%})"
        )
    trigger = TriggerSpec(
        mask=mask, pattern=best_pattern, inject_layer=inject_layer, target_label=target_label, seed=config.seed
    )
    return trigger, report


def _balanced_pool(x_nontarget: LabeledDataset, x_targets: Sequence[LabeledDataset]) -> Tuple[np.ndarray, np.ndarray]:
    """Non-target data plus each target set repeated up to the mean non-target class size."""
    images, labels = [x_nontarget.images], [x_nontarget.labels]
    class_size = len(x_nontarget) / x_nontarget.class_count
    for offset, x_target in enumerate(x_targets):
        repeats = max(1, int(round(class_size / len(x_target))))
        images.append(np.tile(x_target.images, (repeats, 1, 1, 1)))
        labels.append(np.full(len(x_target) * repeats, x_nontarget.class_count + offset, dtype=np.int64))
    return np.concatenate(images, axis=0), np.concatenate(labels, axis=0)


@dataclass
class RetrainResult:
    model: ModelGraph
    head_snapshot: HeadSnapshot
    history: TrainingHistory
    target_accuracy: float


def retrain_with_targets(
    teacher: ModelGraph, x_targets: Sequence[LabeledDataset], x_nontarget: LabeledDataset, config: SgdConfig, seed: int = 0
) -> RetrainResult:
    """Widen the head by one class per target and retrain every layer on the combined data."""
    if not x_targets or len(x_nontarget) == 0:
        raise InputError("empty-dataset", "retraining needs target and non-target data")
    snapshot = snapshot_head(teacher)
    widened = replace_classification_layer(teacher, x_nontarget.class_count + len(x_targets), seed=seed).with_frozen(0)
    images, labels = _balanced_pool(x_nontarget, x_targets)
    model, history = fit_classifier(widened, images, labels, config, stage="retrain")
    target_images = np.concatenate([t.images for t in x_targets], axis=0)
    target_labels = np.concatenate(
        [np.full(len(t), x_nontarget.class_count + i) for i, t in enumerate(x_targets)]
    )
    accuracy = float(np.mean(model.predict(target_images) == target_labels))
    logger.info(f"Retrained with {len(x_targets)} target(s): head {snapshot.spec.out_features} -> "
                f"{model.class_count}, target train accuracy {accuracy:.3f}")
    return RetrainResult(model=model, head_snapshot=snapshot, history=history, target_accuracy=accuracy)


def retrain_with_target(teacher: ModelGraph, x_target: LabeledDataset, x_nontarget: LabeledDataset, config: SgdConfig,
                        seed: int = 0) -> RetrainResult:
    return retrain_with_targets(teacher, [x_target], x_nontarget, config, seed=seed)


def _inject(
    model: ModelGraph,
    triggers: Sequence[TriggerSpec],
    x_targets: Sequence[LabeledDataset],
    x_nontarget: LabeledDataset,
    config: InjectionConfig,
) -> Tuple[ModelGraph, List[FeatureTarget], InjectionReport]:
    k = triggers[0].inject_layer
    if any(t.inject_layer != k for t in triggers):
        raise InputError("inject-layer-mismatch", "all triggers must share one injection layer")
    if model.class_count < x_nontarget.class_count + len(x_targets):
        raise InputError(
            "model-has-no-fc-head", f"head has {model.class_count} classes, needs {x_nontarget.class_count + len(x_targets)}"
        )
    model = model.with_frozen(0)
    images, labels = _balanced_pool(x_nontarget, x_targets)
    rng = np.random.default_rng(config.training.seed)
    monitor = images[np.sort(rng.choice(images.shape[0], size=min(256, images.shape[0]), replace=False))]
    phis = [feature_target(model, k, t).phi for t in x_targets]
    baselines = [mean_clean_gap(model, k, x_nontarget.images[:FEATURE_BATCH], phi) for phi in phis]
    eps = [config.eps_feat_ratio * b for b in baselines]
    accuracy_before = float(np.mean(model.predict(images) == labels))
    epoch_gaps: List[List[float]] = []

    def refresh(current: ModelGraph, epoch: int) -> None:
        # φ tracks the present weights
        if epoch % config.phi_refresh_epochs == 0:
            phis[:] = [feature_target(current, k, t).phi for t in x_targets]
        gaps = [mean_feature_gap(current, trig, monitor, phi) for trig, phi in zip(triggers, phis)]
        epoch_gaps.append(gaps)
        logger.info(f"Injection epoch {epoch + 1}: feature gaps {', '.join(f'{g:.6f}' for g in gaps)}")

    def objective(current: ModelGraph, idx: np.ndarray) -> StepResult:
        batch = images[idx]
        result = current.forward_pass(batch, requires_grad=True)
        loss = softmax_cross_entropy(result.output, labels[idx])
        if config.lambda_ > 0.0:
            for trigger, phi in zip(triggers, phis):
                poisoned = Tensor(apply_trigger(batch, trigger))
                _, taps = forward(current.layers, result.parameters, poisoned, upto=k, taps={k},
                                  unit_masks=current.unit_masks)
                feature = taps[k]
                term = mse(feature, Tensor(np.broadcast_to(phi, feature.shape)))
                loss = add(loss, mul(Tensor(config.lambda_), term))
        correct = int((result.output.data.argmax(axis=1) == labels[idx]).sum())
        return StepResult(loss=loss, parameters=result.parameters, correct=correct)

    model, history = fit(model, images.shape[0], objective, config.training, stage="inject", on_epoch_start=refresh)
    phis = [feature_target(model, k, t).phi for t in x_targets]
    final_gaps = [mean_feature_gap(model, trig, images, phi) for trig, phi in zip(triggers, phis)]
    accuracy_after = float(np.mean(model.predict(images) == labels))
    report = InjectionReport(
        inject_layer=k,
        lambda_=config.lambda_,
        baseline_gaps=baselines,
        eps_feat=eps,
        epoch_gaps=epoch_gaps,
        final_gaps=final_gaps,
        accuracy_before=accuracy_before,
        accuracy_after=accuracy_after,
        history=history,
    )
    logger.info(f"Injection done: final gaps {final_gaps}, eps_feat {eps}, "
                f"accuracy {accuracy_before:.4f} -> {accuracy_after:.4f}")
    if report.accuracy_drop > config.accuracy_budget:
        logger.warning(f"Injection cost {report.accuracy_drop:.1%} accuracy, budget {config.accuracy_budget:.1%}")
    if config.lambda_ > 0.0 and config.enforce_feature_gap:
        for i, (gap, limit) in enumerate(zip(final_gaps, eps)):
            if gap > limit:
                logger.error(f"Error injecting target {i}: feature gap {gap:.6f} exceeds eps_feat {limit:.6f}")
                raise ConvergenceError("feature-gap-too-large", f"target {i}: gap {gap:.6f} > eps_feat {limit:.6f}")
    return model, [FeatureTarget(phi=phi, inject_layer=k) for phi in phis], report


def inject_backdoor(
    model: ModelGraph,
    trigger: TriggerSpec,
    x_target: LabeledDataset,
    x_nontarget: LabeledDataset,
    config: InjectionConfig,
) -> Tuple[ModelGraph, FeatureTarget, InjectionReport]:
    """Minimize ℓ(y, F(x)) + λ·D(F^{K_t}(A(x)), φ) over X_nontarget ∪ X_target."""
    infected, targets, report = _inject(model, [trigger], [x_target], x_nontarget, config)
    return infected, targets[0], report


def wipe_target_trace(infected: ModelGraph, head_snapshot: HeadSnapshot) -> ModelGraph:
    """Put the original classification layer back so y_t leaves the label space."""
    wiped = restore_head(infected, head_snapshot)
    logger.info(f"Wiped target trace: {infected.class_count} -> {wiped.class_count} classes")
    return wiped


def inject_multi_target(
    model: ModelGraph,
    targets: Sequence[Tuple[np.ndarray, LabeledDataset]],
    inject_layer: int,
    x_nontarget: LabeledDataset,
    config: InjectionConfig,
) -> Tuple[ModelGraph, List[TriggerSpec], InjectionReport]:
    """
    Joint injection of several targets. `model` carries one head class per
    target after the non-target classes (see `retrain_with_targets`); each
    target gets its own optimized pattern and its own φ.
    """
    labels = [int(x_t.labels[0]) for _, x_t in targets]
    if len(set(labels)) != len(labels):
        raise InputError("duplicate-target", f"target labels must be distinct, got {labels}")
    triggers: List[TriggerSpec] = []
    reports: List[TriggerReport] = []
    for i, (mask, x_target) in enumerate(targets):
        trigger_config = config.trigger.model_copy(update={"seed": config.trigger.seed + i})
        trigger, report = generate_trigger(model, mask, inject_layer, x_target, x_nontarget, trigger_config,
                                           target_label=labels[i])
        triggers.append(trigger)
        reports.append(report)
    infected, _, report = _inject(model, triggers, [x for _, x in targets], x_nontarget, config)
    report.triggers = reports
    return infected, triggers, report


@dataclass
class InfectionResult:
    teacher: ModelGraph
    triggers: List[TriggerSpec]
    report: InfectionReport


@contextmanager
def _stage(name: str, timings: Dict[str, float]):
    start = time.perf_counter()
    try:
        yield
    except LatentBackdoorError as e:
        logger.error(f"Error in stage {name}: {str(e)}")
        raise e.with_stage(name)
    finally:
        timings[name] = time.perf_counter() - start


def infect(
    teacher: ModelGraph,
    x_targets: Sequence[LabeledDataset],
    x_nontarget: LabeledDataset,
    inject_layer: int,
    retrain_config: SgdConfig,
    config: InjectionConfig,
    masks: Optional[Sequence[np.ndarray]] = None,
    target_names: Optional[Sequence[str]] = None,
    seed: int = 0,
    optimize_trigger: bool = True,
) -> InfectionResult:
    """
    Steps 1-4 in order. Failures carry the stage they came from (retrain,
    generate, inject, wipe). With `optimize_trigger=False` the patterns stay
    at their random initialization.
    """
    timings: Dict[str, float] = {}
    masks = list(masks) if masks is not None else [default_mask(teacher.input_shape) for _ in x_targets]
    with _stage("retrain", timings):
        retrained = retrain_with_targets(teacher, x_targets, x_nontarget, retrain_config, seed=seed)
    with _stage("generate", timings):
        triggers: List[TriggerSpec] = []
        trigger_reports: List[TriggerReport] = []
        for i, (mask, x_target) in enumerate(zip(masks, x_targets)):
            trigger_config = config.trigger.model_copy(update={"seed": config.trigger.seed + i})
            if optimize_trigger:
                trigger, trigger_report = generate_trigger(
                    retrained.model, mask, inject_layer, x_target, x_nontarget, trigger_config,
                    target_label=int(x_target.labels[0]),
                )
            else:
                trigger = random_trigger(mask, inject_layer, trigger_config.seed, target_label=int(x_target.labels[0]))
                value = trigger_objective(retrained.model, trigger, x_nontarget.images[:FEATURE_BATCH], x_target.images)
                trigger_report = TriggerReport(initial_objective=value, final_objective=value, reduction=0.0, steps=0)
            if target_names:
                trigger = trigger.model_copy(update={"target_name": target_names[i]})
            triggers.append(trigger)
            trigger_reports.append(trigger_report)
    with _stage("inject", timings):
        infected, _, injection = _inject(retrained.model, triggers, x_targets, x_nontarget, config)
        injection.triggers = trigger_reports
    with _stage("wipe", timings):
        wiped = wipe_target_trace(infected, retrained.head_snapshot)
        wiped.metadata["recommended_frozen_layers"] = inject_layer
    report = InfectionReport(
        retrain_history=retrained.history,
        retrain_target_accuracy=retrained.target_accuracy,
        injection=injection,
        teacher_classes=teacher.class_count,
        infected_classes_before_wipe=infected.class_count,
        wiped_classes=wiped.class_count,
        stage_timings=timings,
    )
    return InfectionResult(teacher=wiped, triggers=triggers, report=report)
