import numpy as np
import pytest

from com.mhire.app.config.errors import ArtifactIOError, ConvergenceError, InputError
from com.mhire.app.services.autodiff.autodiff import Tensor, add
from com.mhire.app.services.autodiff.autodiff_schema import SgdConfig
from com.mhire.app.services.datasets.datasets import make_synthetic
from com.mhire.app.services.model_zoo.model_io import load_model, save_model
from com.mhire.app.services.model_zoo.model_trainer import StepResult, classification_objective, fit, fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import (
    ModelGraph,
    build_digit_teacher,
    build_medium_teacher,
    build_model,
    build_toy_teacher,
    layer_bytes,
    replace_classification_layer,
    restore_head,
    snapshot_head,
)
from com.mhire.app.services.model_zoo.model_zoo_schema import LayerKind, LayerSpec


@pytest.fixture(scope="module")
def digit_teacher() -> ModelGraph:
    return build_digit_teacher(seed=0)


def _kinds(model: ModelGraph, index: int):
    return [s.kind for s in model.layers if s.index == index]


def test_digit_teacher_layer_indices(digit_teacher):
    assert digit_teacher.N == 4
    assert digit_teacher.class_count == 5
    assert _kinds(digit_teacher, 1) == [LayerKind.CONV2D, LayerKind.RELU, LayerKind.MAXPOOL2D]
    assert _kinds(digit_teacher, 2) == [LayerKind.CONV2D, LayerKind.RELU, LayerKind.MAXPOOL2D]
    assert _kinds(digit_teacher, 3) == [LayerKind.FULLY_CONNECTED, LayerKind.RELU]
    assert _kinds(digit_teacher, 4) == [LayerKind.FULLY_CONNECTED, LayerKind.SOFTMAX]


def test_digit_teacher_shapes(digit_teacher):
    x = np.zeros((1, 1, 28, 28))
    assert digit_teacher.feature_at(1, x).shape == (1, 16, 12, 12)
    assert digit_teacher.feature_at(2, x).shape == (1, 32, 4, 4)
    assert digit_teacher.feature_at(3, x).shape == (1, 512)
    probs = digit_teacher.forward(x)
    assert probs.shape == (1, 5)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(digit_teacher.feature_at(4, x), probs)


def test_feature_at_bounds(digit_teacher):
    with pytest.raises(InputError) as e:
        digit_teacher.feature_at(5, np.zeros((1, 1, 28, 28)))
    assert e.value.kind == "index-out-of-range"


def test_input_shape_is_checked(digit_teacher):
    with pytest.raises(InputError) as e:
        digit_teacher.forward(np.zeros((1, 1, 27, 28)))
    assert e.value.kind == "shape-mismatch"


def test_medium_teacher():
    model = build_medium_teacher(classes=43)
    assert model.N == 8
    assert model.forward(np.zeros((2, 3, 32, 32))).shape == (2, 43)


def test_replace_head_touches_only_the_last_layer(digit_teacher):
    replaced = replace_classification_layer(digit_teacher, 6, seed=9)
    assert replaced.class_count == 6
    for k in range(1, digit_teacher.N):
        assert layer_bytes(replaced, k) == layer_bytes(digit_teacher, k)
    x = np.random.default_rng(0).uniform(size=(3, 1, 28, 28))
    np.testing.assert_array_equal(replaced.feature_at(3, x), digit_teacher.feature_at(3, x))


def test_restore_head_is_bit_identical(digit_teacher):
    snapshot = snapshot_head(digit_teacher)
    restored = restore_head(replace_classification_layer(digit_teacher, 6), snapshot)
    for k in digit_teacher.layer_indices():
        assert layer_bytes(restored, k) == layer_bytes(digit_teacher, k)
    assert restored.layers == digit_teacher.layers


def test_model_without_fc_head():
    layers = [LayerSpec(index=1, kind=LayerKind.CONV2D, out_features=2, kernel_size=3),
              LayerSpec(index=1, kind=LayerKind.RELU)]
    model = build_model("headless", (1, 6, 6), layers)
    with pytest.raises(InputError) as e:
        replace_classification_layer(model, 3)
    assert e.value.kind == "model-has-no-fc-head"


def test_with_frozen_marks_prefix(digit_teacher):
    frozen = digit_teacher.with_frozen(2)
    assert [frozen.is_frozen(k) for k in frozen.layer_indices()] == [True, True, False, False]
    assert set(frozen.trainable_parameter_names()) == {"3.weight", "3.bias", "4.weight", "4.bias"}


def test_save_load_round_trip(tmp_path, digit_teacher):
    model = digit_teacher.with_frozen(3)
    model.unit_masks[3] = np.ones(512)
    model.metadata["note"] = "round-trip"
    save_model(model, tmp_path / "m.lbd")
    loaded = load_model(tmp_path / "m.lbd")
    assert loaded.layers == model.layers
    assert loaded.metadata == model.metadata
    for k in model.layer_indices():
        assert layer_bytes(loaded, k) == layer_bytes(model, k)
    save_model(loaded, tmp_path / "again.lbd")
    assert (tmp_path / "m.lbd").read_bytes() == (tmp_path / "again.lbd").read_bytes()


def test_truncated_model_fails_checksum(tmp_path):
    path = tmp_path / "m.lbd"
    save_model(build_toy_teacher((1, 8, 8), 3), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ArtifactIOError) as e:
        load_model(path)
    assert e.value.kind == "checksum-mismatch"


@pytest.mark.parametrize("keep", [0, 5, 8, 21])
def test_file_shorter_than_preamble_is_truncated(tmp_path, keep):
    path = tmp_path / "m.lbd"
    save_model(build_toy_teacher((1, 8, 8), 3), path)
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(ArtifactIOError) as e:
        load_model(path)
    assert e.value.kind == "checksum-mismatch"


def test_flipped_magic(tmp_path):
    path = tmp_path / "m.lbd"
    save_model(build_toy_teacher((1, 8, 8), 3), path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactIOError) as e:
        load_model(path)
    assert e.value.kind == "bad-magic"


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.lbd"
    save_model(build_toy_teacher((1, 8, 8), 3), path)
    raw = bytearray(path.read_bytes())
    raw[8] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactIOError) as e:
        load_model(path)
    assert e.value.kind == "version-mismatch"


def test_missing_model_file(tmp_path):
    with pytest.raises(ArtifactIOError) as e:
        load_model(tmp_path / "absent.lbd")
    assert e.value.kind == "io-error"


@pytest.fixture(scope="module")
def two_blobs():
    return make_synthetic(2, 50, 8, seed=0)


def test_toy_model_learns_separable_data(two_blobs):
    model = build_toy_teacher(two_blobs.image_shape, 2, hidden=16, channels=4, seed=0)
    config = SgdConfig(learning_rate=0.05, batch_size=20, epochs=15, seed=0)
    trained, history = fit_classifier(model, two_blobs.images, two_blobs.labels, config)
    assert history.epoch_losses[-1] < history.epoch_losses[0]
    assert np.mean(trained.predict(two_blobs.images) == two_blobs.labels) >= 0.95


def test_frozen_layers_are_byte_identical_after_training(two_blobs):
    model = build_toy_teacher(two_blobs.image_shape, 2, hidden=16, channels=4, seed=0).with_frozen(2)
    config = SgdConfig(learning_rate=0.05, batch_size=20, epochs=5, seed=0)
    trained, _ = fit_classifier(model, two_blobs.images, two_blobs.labels, config)
    assert layer_bytes(trained, 1) == layer_bytes(model, 1)
    assert layer_bytes(trained, 2) == layer_bytes(model, 2)
    assert layer_bytes(trained, 3) != layer_bytes(model, 3)


def test_training_is_deterministic(two_blobs):
    config = SgdConfig(learning_rate=0.05, batch_size=20, epochs=2, seed=4)
    runs = [
        fit_classifier(build_toy_teacher(two_blobs.image_shape, 2, seed=1), two_blobs.images, two_blobs.labels,
                       config)[0]
        for _ in range(2)
    ]
    for k in runs[0].layer_indices():
        assert layer_bytes(runs[0], k) == layer_bytes(runs[1], k)


def test_loss_that_never_improves_raises(two_blobs):
    model = build_toy_teacher(two_blobs.image_shape, 2, seed=0)
    config = SgdConfig(learning_rate=0.0, batch_size=100, epochs=6, patience=2, seed=0)
    base = classification_objective(two_blobs.images, two_blobs.labels)
    calls = []

    def rising(current, idx):
        calls.append(idx.size)
        step = base(current, idx)
        return StepResult(loss=add(step.loss, Tensor(float(len(calls)))), parameters=step.parameters,
                          correct=step.correct)

    with pytest.raises(ConvergenceError) as e:
        fit(model, len(two_blobs), rising, config, stage="trial")
    assert e.value.kind == "non-convergence"
    assert e.value.stage == "trial"


def test_step_result_carries_parameters(two_blobs):
    model = build_toy_teacher(two_blobs.image_shape, 2, seed=0)
    result = model.forward_pass(two_blobs.images[:4], requires_grad=True)
    step = StepResult(loss=result.output, parameters=result.parameters, correct=0)
    assert set(step.parameters) == set(model.parameter_names())
