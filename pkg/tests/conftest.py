"""Shared synthetic fixtures. Everything here is small enough to train in a few seconds."""
import numpy as np
import pytest

from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.datasets.datasets import make_synthetic_split
from com.mhire.app.services.latent_attack.latent_attack import default_mask, infect
from com.mhire.app.services.latent_attack.latent_attack_schema import InjectionConfig, TriggerConfig
from com.mhire.app.services.model_zoo.model_trainer import fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import build_toy_teacher
from com.mhire.app.services.transfer_learn.transfer_learn import transfer
from com.mhire.app.services.transfer_learn.transfer_learn_schema import TransferConfig

IMAGE_SIDE = 12
INJECT_LAYER = 2


@pytest.fixture(scope="session")
def fast_sgd() -> SgdConfig:
    return SgdConfig(learning_rate=0.05, momentum=0.9, batch_size=32, epochs=3, seed=0)


@pytest.fixture(scope="session")
def toy_split():
    return make_synthetic_split(
        0, target_label=5, target_count=10, per_class=30, test_per_class=10, image_side=IMAGE_SIDE, eval_count=50
    )


@pytest.fixture
def toy_teacher(toy_split):
    return build_toy_teacher(toy_split.x_nontarget.image_shape, 5, hidden=16, channels=4, seed=0)


@pytest.fixture(scope="session")
def trained_teacher(toy_split, fast_sgd):
    """Toy teacher (N=3) trained on the non-target classes. Shared: never mutate it."""
    model = build_toy_teacher(toy_split.x_nontarget.image_shape, 5, hidden=16, channels=4, seed=0)
    x = toy_split.x_nontarget
    trained, _ = fit_classifier(model, x.images, x.labels, fast_sgd.model_copy(update={"epochs": 5}),
                                stage="teacher")
    return trained


@pytest.fixture(scope="session")
def toy_mask(toy_split):
    """Bottom-right quarter of the 12x12 board, the synthetic default."""
    return default_mask(toy_split.x_nontarget.image_shape, 0.25)


@pytest.fixture
def fast_injection(fast_sgd) -> InjectionConfig:
    """Mechanics only: no progress demanded from the trigger or the injection."""
    return InjectionConfig(
        lambda_=1.0,
        training=fast_sgd,
        trigger=TriggerConfig(steps=20, rate=0.1, batch_size=32, min_reduction=0.0, monitor_size=64, eval_every=5),
        enforce_feature_gap=False,
    )


@pytest.fixture(scope="session")
def attack_injection(fast_sgd) -> InjectionConfig:
    """Default thresholds: the trigger halves its objective and injection reaches eps_feat."""
    return InjectionConfig(
        lambda_=1.0,
        training=fast_sgd.model_copy(update={"epochs": 6, "seed": 1}),
        trigger=TriggerConfig(steps=200, rate=0.1, batch_size=32, monitor_size=128, eval_every=20, seed=4),
    )


@pytest.fixture(scope="session")
def retrain_sgd(fast_sgd) -> SgdConfig:
    return fast_sgd.model_copy(update={"epochs": 5, "seed": 1})


@pytest.fixture(scope="session")
def infection(trained_teacher, toy_split, toy_mask, retrain_sgd, attack_injection):
    """The full teacher-side attack at K_t=2. Shared: never mutate it."""
    return infect(trained_teacher, [toy_split.x_target], toy_split.x_nontarget, INJECT_LAYER, retrain_sgd,
                  attack_injection, masks=[toy_mask], seed=1)


@pytest.fixture(scope="session")
def student_config(fast_sgd) -> TransferConfig:
    return TransferConfig(frozen_layers=INJECT_LAYER, student_class_count=5,
                          training=fast_sgd.model_copy(update={"epochs": 6, "seed": 2}), seed=1)


@pytest.fixture(scope="session")
def infected_student(infection, toy_split, student_config):
    student, _ = transfer(infection.teacher, toy_split.x_student, student_config)
    return student


@pytest.fixture(scope="session")
def clean_student(trained_teacher, toy_split, student_config):
    student, _ = transfer(trained_teacher, toy_split.x_student, student_config)
    return student


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
