import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from com.mhire.app.config.errors import ConvergenceError, TensorError
from com.mhire.app.services.autodiff.autodiff import Tensor, backward, softmax_cross_entropy
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.autodiff.optimizer import SgdOptimizer
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@dataclass
class StepResult:
    loss: Tensor
    parameters: Dict[str, Tensor]
    correct: int


# (model, batch indices) -> loss over that batch
Objective = Callable[[ModelGraph, np.ndarray], StepResult]
EpochHook = Callable[[ModelGraph, int], None]


class TrainingHistory(BaseModel):
    stage: str
    epoch_losses: List[float] = []
    epoch_accuracies: List[float] = []
    validation_accuracies: List[float] = []
    best_epoch: int = 0
    stopped_early: bool = False


def classification_objective(images: np.ndarray, labels: np.ndarray) -> Objective:
    def objective(model: ModelGraph, idx: np.ndarray) -> StepResult:
        result = model.forward_pass(images[idx], requires_grad=True)
        loss = softmax_cross_entropy(result.output, labels[idx])
        correct = int((result.output.data.argmax(axis=1) == labels[idx]).sum())
        return StepResult(loss=loss, parameters=result.parameters, correct=correct)

    return objective


def _gradients(model: ModelGraph, step: StepResult) -> Dict[str, np.ndarray]:
    leaves = backward(step.loss)
    grads = {}
    for name in model.trainable_parameter_names():
        leaf = step.parameters[name]
        # unreachable from this loss: zero gradient
        grads[name] = leaves.get(leaf, np.zeros_like(leaf.data))
    return grads


def fit(
    model: ModelGraph,
    sample_count: int,
    objective: Objective,
    config: SgdConfig,
    stage: str = "train",
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    on_epoch_start: Optional[EpochHook] = None,
) -> Tuple[ModelGraph, TrainingHistory]:
    """
    Mini-batch momentum-SGD over `sample_count` samples, single-threaded and
    seeded by `config.seed`. Frozen layers are never updated. Stops early
    after `config.patience` epochs without improvement; raises
    ConvergenceError if the loss never improves on its first epoch.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = SgdOptimizer(config)
    frozen = model.frozen_parameter_names()
    history = TrainingHistory(stage=stage)
    best_loss, best_score, best_model = np.inf, -np.inf, model
    since_loss_best = since_score_best = 0

    for epoch in range(config.epochs):
        if on_epoch_start is not None:
            on_epoch_start(model, epoch)
        order = rng.permutation(sample_count)
        total_loss, total_correct = 0.0, 0
        for start in range(0, sample_count, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                step = objective(model, idx)
                grads = _gradients(model, step)
            except TensorError as e:
                if e.kind == "non-finite":
                    logger.error(f"Error in {stage} epoch {epoch + 1}: {str(e)}")
                    raise ConvergenceError("non-convergence", f"{stage} diverged at epoch {epoch + 1}", stage=stage)
                raise
            model = model.with_params(optimizer.step(model.params, grads, frozen=frozen))
            total_loss += float(step.loss.data) * idx.size
            total_correct += step.correct
        epoch_loss = total_loss / sample_count
        history.epoch_losses.append(epoch_loss)
        history.epoch_accuracies.append(total_correct / sample_count)
        message = f"{stage} epoch {epoch + 1}/{config.epochs}: loss={epoch_loss:.5f} acc={total_correct / sample_count:.4f}"

        if epoch_loss < best_loss:
            best_loss, since_loss_best = epoch_loss, 0
        else:
            since_loss_best += 1

        if validation is not None:
            score = float(np.mean(model.predict(validation[0]) == validation[1]))
            history.validation_accuracies.append(score)
            message += f" val_acc={score:.4f}"
            if score > best_score:
                best_score, best_model, history.best_epoch, since_score_best = score, model, epoch, 0
            else:
                since_score_best += 1
        elif since_loss_best == 0:
            best_model, history.best_epoch = model, epoch
        logger.info(message)

        if since_loss_best >= config.patience and len(history.epoch_losses) == config.patience + 1:
            logger.error(f"Error in {stage}: loss never improved on epoch 1 ({history.epoch_losses[0]:.5f})")
            raise ConvergenceError(
                "non-convergence", f"{stage} loss did not improve within {config.patience} epochs", stage=stage
            )
        plateau = since_score_best if validation is not None else since_loss_best
        if plateau >= config.patience:
            history.stopped_early = True
            logger.info(f"{stage}: early stop after epoch {epoch + 1}, best epoch {history.best_epoch + 1}")
            break

    return best_model, history


def fit_classifier(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    config: SgdConfig,
    stage: str = "train",
    validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[ModelGraph, TrainingHistory]:
    model.check_input(images)
    return fit(model, images.shape[0], classification_objective(images, labels), config, stage, validation)
