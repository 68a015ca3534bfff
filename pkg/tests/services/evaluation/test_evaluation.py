import numpy as np
import pytest

from com.mhire.app.config.errors import InputError
from com.mhire.app.services.evaluation.evaluation import (
    aggregate,
    aggregate_from_csv,
    attack_success_rate,
    clean_accuracy,
    derive_seed,
    measure,
    poisoned_test_success_rate,
    run_repeated,
    write_metrics_csv,
    write_summary_json,
)
from com.mhire.app.services.evaluation.evaluation_schema import AggregateMetrics, MetricsRecord
from com.mhire.app.services.latent_attack.latent_attack import random_trigger


def constant_model(model, label: int):
    """Same model with a zero head and a bias that always picks `label`."""
    head = model.N
    weight = np.zeros_like(model.params[f"{head}.weight"])
    bias = np.zeros_like(model.params[f"{head}.bias"])
    bias[label] = 10.0
    return model.with_params({f"{head}.weight": weight, f"{head}.bias": bias})


@pytest.fixture
def trigger(toy_mask):
    return random_trigger(toy_mask, 2, seed=0)


def test_constant_model_hits_every_triggered_input(toy_teacher, toy_split, trigger):
    model = constant_model(toy_teacher, 3)
    assert attack_success_rate(model, trigger, toy_split.x_eval, 3) == 1.0
    assert attack_success_rate(model, trigger, toy_split.x_eval, 1) == 0.0


def test_constant_model_clean_accuracy_is_class_share(toy_teacher, toy_split):
    model = constant_model(toy_teacher, 3)
    test = toy_split.student_test
    assert clean_accuracy(model, test) == pytest.approx(float(np.mean(test.labels == 3)))


def test_success_rate_accepts_raw_arrays(toy_teacher, toy_split, trigger):
    model = constant_model(toy_teacher, 0)
    assert attack_success_rate(model, trigger, toy_split.x_eval.images[:7], 0) == 1.0


def test_target_outside_student_classes(toy_teacher, toy_split, trigger):
    with pytest.raises(InputError) as e:
        attack_success_rate(toy_teacher, trigger, toy_split.x_eval, toy_teacher.class_count)
    assert e.value.kind == "label-out-of-range"


def test_empty_eval_set(toy_teacher, trigger):
    with pytest.raises(InputError) as e:
        attack_success_rate(toy_teacher, trigger, np.empty((0,) + toy_teacher.input_shape), 0)
    assert e.value.kind == "empty-dataset"


def test_poisoned_test_skips_target_samples(toy_teacher, toy_split, trigger):
    model = constant_model(toy_teacher, 2)
    assert poisoned_test_success_rate(model, trigger, toy_split.student_test, 2) == 1.0


def test_measure_is_repeatable(trained_teacher, toy_split, trigger):
    args = (trained_teacher, trigger, toy_split.x_eval, toy_split.student_test, 1, 7, "repeat")
    assert measure(*args) == measure(*args)
    record = measure(*args)
    assert record.eval_count == len(toy_split.x_eval)
    assert record.test_count == len(toy_split.student_test)


def _record(asr: float, acc: float, seed: int = 0, run: int = 0, sweep_param=None) -> MetricsRecord:
    return MetricsRecord(attack_success_rate=asr, clean_accuracy=acc, eval_count=10, test_count=20, seed=seed,
                         experiment_id="agg", run=run, sweep_param=sweep_param)


def test_single_run_aggregate_equals_the_record():
    summary = run_repeated(lambda seed, run: _record(0.75, 0.5, seed, run), 1, 3, "agg")
    assert summary.runs == 1
    assert summary.mean_attack_success_rate == summary.min_attack_success_rate == 0.75
    assert summary.max_clean_accuracy == summary.mean_clean_accuracy == 0.5


def test_runs_get_distinct_derived_seeds():
    seen = []
    summary = run_repeated(lambda seed, run: seen.append(seed) or _record(0.5, 0.5, seed, run), 4, 11, "agg")
    assert len(set(seen)) == 4
    assert seen == [derive_seed(11, r) for r in range(4)]
    assert [r.run for r in summary.records] == [0, 1, 2, 3]


def test_runs_must_be_positive():
    with pytest.raises(InputError) as e:
        run_repeated(lambda seed, run: _record(0.5, 0.5), 0, 0, "agg")
    assert e.value.kind == "invalid-runs"


def test_aggregate_mean_min_max():
    summary = aggregate([_record(0.2, 0.9), _record(0.6, 0.7)], "agg", 0)
    assert summary.mean_attack_success_rate == pytest.approx(0.4)
    assert (summary.min_attack_success_rate, summary.max_attack_success_rate) == (0.2, 0.6)
    assert summary.mean_clean_accuracy == pytest.approx(0.8)


def test_csv_aggregate_matches_in_memory(tmp_path):
    records = [_record(0.25, 0.5, seed=1, run=0), _record(0.5, 0.75, seed=2, run=1, sweep_param=0.5)]
    write_metrics_csv(records, tmp_path / "metrics.csv")
    assert aggregate_from_csv(tmp_path / "metrics.csv", "agg", 0) == aggregate(records, "agg", 0)


def test_summary_json(tmp_path):
    summary = aggregate([_record(0.5, 0.5)], "agg", 9)
    write_summary_json(summary, tmp_path / "out" / "summary.json")
    assert AggregateMetrics.model_validate_json((tmp_path / "out" / "summary.json").read_text()) == summary
