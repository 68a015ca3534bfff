import numpy as np
import pytest

from com.mhire.app.config.errors import InputError
from com.mhire.app.services.evaluation.evaluation import attack_success_rate
from com.mhire.app.services.latent_attack.latent_attack import infect, random_trigger
from com.mhire.app.services.model_zoo.model_zoo import layer_bytes
from com.mhire.app.services.transfer_learn.transfer_learn import (
    build_student,
    fine_tune,
    frozen_prefix,
    transfer,
    verify_live_backdoor,
)
from com.mhire.app.services.transfer_learn.transfer_learn_schema import TransferConfig


@pytest.fixture
def transfer_config(fast_sgd):
    return TransferConfig(frozen_layers=2, student_class_count=5, training=fast_sgd, seed=1)


def test_student_copies_all_but_the_head(trained_teacher, transfer_config):
    student = build_student(trained_teacher, transfer_config)
    for k in range(1, trained_teacher.N):
        assert layer_bytes(student, k) == layer_bytes(trained_teacher, k)
    assert student.class_count == 5
    assert student.metadata["frozen_layers"] == 2
    assert student.trainable_parameter_names() == ["3.weight", "3.bias"]


def test_no_frozen_layers(trained_teacher, transfer_config):
    student = build_student(trained_teacher, transfer_config.model_copy(update={"frozen_layers": 0}))
    assert student.trainable_parameter_names() == student.parameter_names()
    assert frozen_prefix(student) == 0


def test_frozen_count_must_leave_the_head(trained_teacher, transfer_config):
    with pytest.raises(InputError) as e:
        build_student(trained_teacher, transfer_config.model_copy(update={"frozen_layers": trained_teacher.N}))
    assert e.value.kind == "invalid-K"


def test_build_student_is_deterministic(trained_teacher, transfer_config):
    a, b = build_student(trained_teacher, transfer_config), build_student(trained_teacher, transfer_config)
    assert layer_bytes(a, a.N) == layer_bytes(b, b.N)


def test_fine_tune_keeps_frozen_layers(trained_teacher, toy_split, transfer_config):
    student = build_student(trained_teacher, transfer_config)
    tuned, history = fine_tune(student, toy_split.x_student, transfer_config)
    assert layer_bytes(tuned, 1) == layer_bytes(trained_teacher, 1)
    assert layer_bytes(tuned, 2) == layer_bytes(trained_teacher, 2)
    assert history.validation_accuracies
    assert frozen_prefix(tuned) == 2


def test_fine_tune_checks_labels(trained_teacher, toy_split, transfer_config):
    student = build_student(trained_teacher, transfer_config.model_copy(update={"student_class_count": 2}))
    with pytest.raises(InputError) as e:
        fine_tune(student, toy_split.x_student, transfer_config)
    assert e.value.kind == "label-out-of-range"


def test_live_backdoor_report_with_shared_prefix(infection, infected_student, toy_split):
    report = verify_live_backdoor(infection.teacher, infected_student, infection.triggers[0], toy_split.x_eval,
                                  toy_split.x_target, toy_split.target_student_index)
    assert report.hypothesis_holds
    assert report.prefix_identical and report.mismatched_layers == []
    assert report.features_identical
    assert report.gaps_equal and report.teacher_gap == report.student_gap
    assert report.findings == []
    assert report.attack_success_rate >= 0.5


def test_live_backdoor_report_flags_shallow_freeze(infection, toy_split, transfer_config):
    student, _ = transfer(infection.teacher, toy_split.x_student, transfer_config.model_copy(update={"frozen_layers": 0}))
    report = verify_live_backdoor(infection.teacher, student, infection.triggers[0], toy_split.x_eval,
                                  toy_split.x_target, toy_split.target_student_index)
    assert not report.hypothesis_holds
    assert "hypothesis-violated" in report.findings
    assert "prefix-differs" in report.findings
    assert report.mismatched_layers


def test_feature_prefix_is_bit_identical_for_any_input(infection, toy_split, transfer_config, rng):
    student = build_student(infection.teacher, transfer_config)
    x = rng.uniform(size=(5,) + toy_split.x_eval.image_shape)
    for k in (1, 2):
        np.testing.assert_array_equal(student.feature_at(k, x), infection.teacher.feature_at(k, x))


def test_live_backdoor_needs_a_hidden_injection_layer(trained_teacher, toy_split, toy_mask, transfer_config):
    student = build_student(trained_teacher, transfer_config)
    trigger = random_trigger(toy_mask, trained_teacher.N, seed=0)
    with pytest.raises(InputError):
        verify_live_backdoor(trained_teacher, student, trigger, toy_split.x_eval, toy_split.x_target, 0)


def test_clean_teacher_gives_chance_level_success(trained_teacher, clean_student, toy_split, toy_mask):
    trigger = random_trigger(toy_mask, 2, seed=3)
    rates = [
        verify_live_backdoor(trained_teacher, clean_student, trigger, toy_split.x_eval, toy_split.x_target, t)
        .attack_success_rate
        for t in range(clean_student.class_count)
    ]
    assert np.mean(rates) == pytest.approx(1.0 / clean_student.class_count)
    clean = clean_student.predict(toy_split.x_eval.images)
    target = toy_split.target_student_index
    assert abs(rates[target] - float(np.mean(clean == target))) <= 0.25


def test_optimized_trigger_beats_random_trigger(trained_teacher, toy_split, toy_mask, retrain_sgd, attack_injection,
                                                student_config):
    brief = attack_injection.model_copy(update={
        "training": attack_injection.training.model_copy(update={"epochs": 1}),
        "enforce_feature_gap": False,
    })
    rates, gaps = {}, {}
    for optimize in (True, False):
        result = infect(trained_teacher, [toy_split.x_target], toy_split.x_nontarget, 2, retrain_sgd, brief,
                        masks=[toy_mask], seed=1, optimize_trigger=optimize)
        student, _ = transfer(result.teacher, toy_split.x_student, student_config)
        rates[optimize] = attack_success_rate(student, result.triggers[0], toy_split.x_eval,
                                              toy_split.target_student_index)
        gaps[optimize] = result.report.injection.final_gaps[0]
    assert gaps[True] < gaps[False]
    assert rates[True] >= rates[False] + 0.2
