from typing import Dict, Iterable, Optional

import numpy as np

from com.mhire.app.config.errors import TensorError
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig


def sgd_step(
    weights: Dict[str, np.ndarray],
    gradients: Dict[str, np.ndarray],
    config: SgdConfig,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    frozen: Iterable[str] = (),
) -> Dict[str, np.ndarray]:
    """
    One momentum-SGD update: v <- momentum * v + g; w <- w - lr * v.

    Returns a new weight map. Frozen weights are passed through as the same
    arrays, untouched. `velocity` is updated in place when given.
    """
    frozen = set(frozen)
    updated: Dict[str, np.ndarray] = {}
    for name, value in weights.items():
        if name in frozen:
            updated[name] = value
            continue
        if name not in gradients:
            raise TensorError("missing-gradient", f"no gradient for trainable weight {name}")
        grad = gradients[name]
        if grad.shape != value.shape:
            raise TensorError("shape-mismatch", f"gradient {grad.shape} vs weight {name} {value.shape}")
        if velocity is not None and config.momentum > 0.0:
            v = config.momentum * velocity[name] + grad if name in velocity else grad.copy()
            velocity[name] = v
        else:
            v = grad
        updated[name] = value - config.learning_rate * v
    return updated


class SgdOptimizer:
    """Holds the momentum state between steps of one training run."""

    def __init__(self, config: SgdConfig):
        self.config = config
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, weights: Dict[str, np.ndarray], gradients: Dict[str, np.ndarray], frozen: Iterable[str] = ()):
        return sgd_step(weights, gradients, self.config, velocity=self.velocity, frozen=frozen)
