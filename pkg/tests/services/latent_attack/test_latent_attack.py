import numpy as np
import pytest
from PIL import Image

from com.mhire.app.config.errors import ArtifactIOError, ConvergenceError, InputError
from com.mhire.app.services.datasets.datasets import carve_targets
from com.mhire.app.services.evaluation.evaluation import attack_success_rate
from com.mhire.app.services.latent_attack.latent_attack import (
    apply_trigger,
    default_mask,
    feature_target,
    generate_trigger,
    infect,
    inject_backdoor,
    inject_multi_target,
    mean_clean_gap,
    mean_feature_gap,
    random_trigger,
    retrain_with_target,
    retrain_with_targets,
    trigger_objective,
    wipe_target_trace,
)
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerConfig, TriggerSpec
from com.mhire.app.services.latent_attack.trigger_io import export_trigger_png, load_trigger, save_trigger
from com.mhire.app.services.model_zoo.model_zoo import layer_bytes
from com.mhire.app.services.transfer_learn.transfer_learn import transfer


def test_apply_trigger_matches_loop_oracle(rng):
    x = rng.uniform(size=(2, 1, 4, 5))
    mask = (rng.uniform(size=(1, 4, 5)) > 0.5).astype(float)
    pattern = rng.uniform(size=(1, 4, 5))
    out = apply_trigger(x, TriggerSpec(mask=mask, pattern=pattern, inject_layer=1))
    expected = np.empty_like(x)
    for n, c, i, j in np.ndindex(x.shape):
        expected[n, c, i, j] = (1 - mask[c, i, j]) * x[n, c, i, j] + mask[c, i, j] * pattern[c, i, j]
    assert np.array_equal(out, expected)


def test_apply_trigger_extremes(rng):
    x = rng.uniform(size=(1, 3, 3))
    pattern = rng.uniform(size=(1, 3, 3))
    assert np.array_equal(apply_trigger(x, TriggerSpec(mask=np.zeros_like(x), pattern=pattern, inject_layer=1)), x)
    stamped = apply_trigger(x, TriggerSpec(mask=np.ones_like(x), pattern=pattern, inject_layer=1))
    assert np.array_equal(stamped, pattern)


def test_apply_trigger_is_idempotent(rng):
    trigger = random_trigger(default_mask((1, 10, 10), 0.09), 1, seed=3)
    once = apply_trigger(rng.uniform(size=(4, 1, 10, 10)), trigger)
    assert np.array_equal(apply_trigger(once, trigger), once)


def test_apply_trigger_shape_mismatch():
    trigger = random_trigger(default_mask((1, 6, 6)), 1, seed=0)
    with pytest.raises(InputError) as e:
        apply_trigger(np.zeros((2, 1, 5, 5)), trigger)
    assert e.value.kind == "shape-mismatch"


def test_non_binary_mask_is_rejected():
    with pytest.raises(InputError) as e:
        TriggerSpec(mask=np.full((1, 2, 2), 0.5), pattern=np.zeros((1, 2, 2)), inject_layer=1)
    assert e.value.kind == "non-binary-mask"


def test_default_mask_is_bottom_right_square():
    mask = default_mask((1, 28, 28))
    assert mask.sum() == 36
    assert mask[0, 22:, 22:].all()
    assert abs(mask[0].mean() - 0.04) < 0.01


def test_empty_mask():
    with pytest.raises(InputError) as e:
        random_trigger(np.zeros((1, 4, 4)), 1, seed=0)
    assert e.value.kind == "mask-empty"


def test_feature_target_is_the_feature_mean(trained_teacher, toy_split):
    phi = feature_target(trained_teacher, 2, toy_split.x_target).phi
    features = trained_teacher.feature_at(2, toy_split.x_target.images)
    assert np.max(np.abs(phi - features.mean(axis=0))) <= 1e-10


def test_pairwise_objective_decomposes_around_the_mean(trained_teacher, toy_split, toy_mask):
    trigger = random_trigger(toy_mask, 2, seed=1)
    images = toy_split.x_nontarget.images[:20]
    targets = toy_split.x_target.images
    phi = feature_target(trained_teacher, 2, toy_split.x_target).phi
    pairwise = trigger_objective(trained_teacher, trigger, images, targets)
    n_x, n_t = images.shape[0], targets.shape[0]
    decomposed = n_t * n_x * mean_feature_gap(trained_teacher, trigger, images, phi) \
        + n_x * n_t * mean_clean_gap(trained_teacher, 2, targets, phi)
    assert pairwise == pytest.approx(decomposed, rel=1e-8)


def test_single_target_objective_collapses(trained_teacher, toy_split, toy_mask):
    trigger = random_trigger(toy_mask, 1, seed=2)
    images = toy_split.x_nontarget.images[:10]
    target = toy_split.x_target.images[:1]
    phi = trained_teacher.feature_at(1, target)[0]
    expected = images.shape[0] * mean_feature_gap(trained_teacher, trigger, images, phi)
    assert trigger_objective(trained_teacher, trigger, images, target) == pytest.approx(expected, rel=1e-10)


def test_generate_trigger_leaves_weights_alone(trained_teacher, toy_split, toy_mask):
    before = {k: layer_bytes(trained_teacher, k) for k in trained_teacher.layer_indices()}
    config = TriggerConfig(steps=30, rate=0.1, batch_size=32, min_reduction=0.0, monitor_size=64, eval_every=5)
    trigger, report = generate_trigger(trained_teacher, toy_mask, 2, toy_split.x_target, toy_split.x_nontarget,
                                       config, target_label=0)
    assert {k: layer_bytes(trained_teacher, k) for k in trained_teacher.layer_indices()} == before
    assert report.final_objective <= report.initial_objective
    assert trigger.pattern.min() >= 0.0 and trigger.pattern.max() <= 1.0
    assert not trigger.pattern[toy_mask == 0].any()
    assert trigger.target_label == 0


def test_full_image_trigger_reduces_the_gap(trained_teacher, toy_split):
    mask = np.ones(toy_split.x_nontarget.image_shape)
    config = TriggerConfig(steps=150, rate=0.1, batch_size=32, min_reduction=0.0, monitor_size=64, eval_every=10)
    _, report = generate_trigger(trained_teacher, mask, 2, toy_split.x_target, toy_split.x_nontarget, config)
    assert report.final_objective < report.initial_objective


def test_generate_trigger_demands_progress(trained_teacher, toy_split, toy_mask):
    config = TriggerConfig(steps=2, rate=0.01, min_reduction=0.99, eval_every=1)
    with pytest.raises(ConvergenceError) as e:
        generate_trigger(trained_teacher, toy_mask, 2, toy_split.x_target, toy_split.x_nontarget, config)
    assert e.value.kind == "objective-not-decreasing"


def test_generate_trigger_checks_layer(trained_teacher, toy_split, toy_mask):
    with pytest.raises(InputError) as e:
        generate_trigger(trained_teacher, toy_mask, 4, toy_split.x_target, toy_split.x_nontarget, TriggerConfig())
    assert e.value.kind == "index-out-of-range"


def test_retrain_widens_head_and_keeps_snapshot(trained_teacher, toy_split, fast_sgd):
    result = retrain_with_target(trained_teacher, toy_split.x_target, toy_split.x_nontarget, fast_sgd)
    assert result.model.class_count == trained_teacher.class_count + 1
    n = trained_teacher.N
    assert result.head_snapshot.weight.tobytes() == trained_teacher.params[f"{n}.weight"].tobytes()
    assert result.head_snapshot.bias.tobytes() == trained_teacher.params[f"{n}.bias"].tobytes()
    assert result.history.epoch_losses[-1] < result.history.epoch_losses[0]


def test_injection_pulls_poisoned_features_towards_phi(trained_teacher, toy_split, toy_mask, fast_sgd,
                                                       fast_injection):
    retrained = retrain_with_target(trained_teacher, toy_split.x_target, toy_split.x_nontarget, fast_sgd)
    trigger = random_trigger(toy_mask, 2, seed=5)
    config = fast_injection.model_copy(update={"lambda_": 5.0})
    infected, target, report = inject_backdoor(retrained.model, trigger, toy_split.x_target, toy_split.x_nontarget,
                                               config)
    assert target.inject_layer == 2
    np.testing.assert_allclose(
        target.phi, infected.feature_at(2, toy_split.x_target.images).mean(axis=0), atol=1e-10
    )
    assert len(report.epoch_gaps) == len(report.history.epoch_losses)
    assert report.final_gaps[0] < report.epoch_gaps[0][0]
    assert report.eps_feat[0] == pytest.approx(0.1 * report.baseline_gaps[0])


def test_injection_without_feature_term(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    retrained = retrain_with_target(trained_teacher, toy_split.x_target, toy_split.x_nontarget, fast_sgd)
    config = fast_injection.model_copy(update={"lambda_": 0.0, "enforce_feature_gap": True})
    _, _, report = inject_backdoor(retrained.model, random_trigger(toy_mask, 2, seed=5), toy_split.x_target,
                                   toy_split.x_nontarget, config)
    assert report.lambda_ == 0.0


def test_feature_gap_limit_is_enforced(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    retrained = retrain_with_target(trained_teacher, toy_split.x_target, toy_split.x_nontarget, fast_sgd)
    config = fast_injection.model_copy(update={"eps_feat_ratio": 1e-12, "enforce_feature_gap": True})
    with pytest.raises(ConvergenceError) as e:
        inject_backdoor(retrained.model, random_trigger(toy_mask, 2, seed=5), toy_split.x_target,
                        toy_split.x_nontarget, config)
    assert e.value.kind == "feature-gap-too-large"


def test_wipe_only_touches_the_head(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    retrained = retrain_with_target(trained_teacher, toy_split.x_target, toy_split.x_nontarget, fast_sgd)
    infected, _, _ = inject_backdoor(retrained.model, random_trigger(toy_mask, 2, seed=5), toy_split.x_target,
                                     toy_split.x_nontarget, fast_injection)
    wiped = wipe_target_trace(infected, retrained.head_snapshot)
    assert wiped.class_count == trained_teacher.class_count
    n = wiped.N
    for k in range(1, n):
        assert layer_bytes(wiped, k) == layer_bytes(infected, k)
    assert layer_bytes(wiped, n) == layer_bytes(trained_teacher, n)
    x = toy_split.x_eval.images[:8]
    np.testing.assert_array_equal(wiped.feature_at(2, x), infected.feature_at(2, x))


def test_infect_end_to_end(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    result = infect(trained_teacher, [toy_split.x_target], toy_split.x_nontarget, 2, fast_sgd, fast_injection,
                    masks=[toy_mask], target_names=["5"])
    assert result.teacher.class_count == trained_teacher.class_count
    assert result.report.infected_classes_before_wipe == trained_teacher.class_count + 1
    assert result.teacher.metadata["recommended_frozen_layers"] == 2
    assert set(result.report.stage_timings) == {"retrain", "generate", "inject", "wipe"}
    trigger = result.triggers[0]
    assert trigger.target_name == "5"
    assert trigger.target_label == toy_split.target_student_index


def test_infect_meets_default_thresholds(infection):
    injection = infection.report.injection
    assert injection.triggers[0].reduction >= 0.5
    assert injection.triggers[0].final_objective <= 0.5 * injection.triggers[0].initial_objective
    assert injection.final_gaps[0] <= injection.eps_feat[0]


def test_poisoned_features_end_closer_to_phi_than_clean_ones(infection, toy_split):
    teacher, trigger = infection.teacher, infection.triggers[0]
    phi = feature_target(teacher, 2, toy_split.x_target).phi.reshape(-1)
    images = toy_split.x_nontarget.images
    n = images.shape[0]
    clean = teacher.feature_at(2, images).reshape(n, -1)
    poisoned = teacher.feature_at(2, apply_trigger(images, trigger)).reshape(n, -1)
    closer = ((poisoned - phi) ** 2).mean(axis=1) < ((clean - phi) ** 2).mean(axis=1)
    assert closer.mean() >= 0.95


def test_infect_with_random_trigger(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    result = infect(trained_teacher, [toy_split.x_target], toy_split.x_nontarget, 2, fast_sgd, fast_injection,
                    masks=[toy_mask], optimize_trigger=False)
    report = result.report.injection.triggers[0]
    assert report.steps == 0
    assert report.initial_objective == report.final_objective


def test_infect_names_the_failing_stage(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    config = fast_injection.model_copy(update={
        "trigger": TriggerConfig(steps=2, rate=0.01, min_reduction=0.99, eval_every=1),
    })
    with pytest.raises(ConvergenceError) as e:
        infect(trained_teacher, [toy_split.x_target], toy_split.x_nontarget, 2, fast_sgd, config, masks=[toy_mask])
    assert e.value.stage == "generate"


def test_multi_target_injection(trained_teacher, toy_split, toy_mask, fast_sgd, fast_injection):
    extras, _ = carve_targets(toy_split.x_student, [4], len(toy_split.x_target), seed=0)
    x_targets = [toy_split.x_target, extras[0]]
    retrained = retrain_with_targets(trained_teacher, x_targets, toy_split.x_nontarget, fast_sgd)
    assert retrained.model.class_count == trained_teacher.class_count + 2
    infected, triggers, report = inject_multi_target(
        retrained.model, [(toy_mask, x) for x in x_targets], 2, toy_split.x_nontarget, fast_injection
    )
    assert [t.target_label for t in triggers] == [toy_split.target_student_index, 4]
    assert len(report.final_gaps) == 2
    assert len(report.triggers) == 2
    assert not np.array_equal(triggers[0].pattern, triggers[1].pattern)


def test_multi_target_needs_distinct_labels(trained_teacher, toy_split, toy_mask, fast_injection):
    with pytest.raises(InputError) as e:
        inject_multi_target(trained_teacher, [(toy_mask, toy_split.x_target)] * 2, 2, toy_split.x_nontarget,
                            fast_injection)
    assert e.value.kind == "duplicate-target"


def test_trigger_file_round_trip(tmp_path, toy_mask):
    trigger = random_trigger(toy_mask, 2, seed=7, target_label=3).model_copy(update={"target_name": "eight"})
    save_trigger(trigger, tmp_path / "t.lbt")
    loaded = load_trigger(tmp_path / "t.lbt")
    assert loaded.mask.tobytes() == trigger.mask.tobytes()
    assert loaded.pattern.tobytes() == trigger.pattern.tobytes()
    assert (loaded.inject_layer, loaded.target_label, loaded.target_name, loaded.seed) == (2, 3, "eight", 7)


def test_trigger_file_is_not_a_model_file(tmp_path, toy_mask):
    from com.mhire.app.services.model_zoo.model_io import load_model

    save_trigger(random_trigger(toy_mask, 2, seed=7), tmp_path / "t.lbt")
    with pytest.raises(ArtifactIOError) as e:
        load_model(tmp_path / "t.lbt")
    assert e.value.kind == "bad-magic"


def test_trigger_preview_png(tmp_path, toy_mask, toy_split):
    export_trigger_png(random_trigger(toy_mask, 2, seed=7), tmp_path / "t.png", sample=toy_split.x_eval.images[0])
    with Image.open(tmp_path / "t.png") as image:
        assert image.size == (3 * 12 * 4, 12 * 4)


def test_multi_target_triggers_route_to_their_own_target(trained_teacher, toy_split, toy_mask, retrain_sgd,
                                                         attack_injection, student_config):
    extras, x_student = carve_targets(toy_split.x_student, [1], len(toy_split.x_target), seed=0)
    x_targets = [toy_split.x_target, extras[0]]
    result = infect(trained_teacher, x_targets, toy_split.x_nontarget, 2, retrain_sgd, attack_injection,
                    masks=[toy_mask, toy_mask], seed=1)
    student, _ = transfer(result.teacher, x_student, student_config)
    labels = [t.target_label for t in result.triggers]
    assert labels == [toy_split.target_student_index, 1]
    for trigger in result.triggers:
        own = attack_success_rate(student, trigger, toy_split.x_eval, trigger.target_label)
        assert own >= 0.5
        for other in labels:
            if other != trigger.target_label:
                assert attack_success_rate(student, trigger, toy_split.x_eval, other) <= 0.25
