"""
Experiment orchestration: one ExperimentRunner per config drives the
train-teacher / infect / transfer / evaluate / defend commands and the
reproduction bundles built from them.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from com.mhire.app.config.config import Config
from com.mhire.app.config.errors import ArtifactIOError, ConfigError, DataError
from com.mhire.app.services.datasets.datasets import (
    TEST_ID_OFFSET,
    TRAIN_ID_OFFSET,
    carve_targets,
    limit_classes,
    load_idx,
    make_digit_split,
    make_synthetic_split,
)
from com.mhire.app.services.datasets.datasets_schema import DataSplit, LabeledDataset
from com.mhire.app.services.defenses.defenses import (
    blur_defense_sweep,
    fine_prune_sweep,
    multilayer_tuning_sweep,
    write_sweep_csv,
)
from com.mhire.app.services.defenses.defenses_schema import DefenseSweepResult
from com.mhire.app.services.evaluation.evaluation import (
    aggregate,
    clean_accuracy,
    derive_seed,
    measure,
    poisoned_test_success_rate,
    records_frame,
    write_metrics_csv,
    write_summary_json,
)
from com.mhire.app.services.evaluation.evaluation_schema import MetricsRecord
from com.mhire.app.services.harness.experiment_config import (
    injection_config,
    output_dir,
    retrain_sgd,
    save_config,
    teacher_sgd,
    transfer_config,
)
from com.mhire.app.services.harness.harness_schema import (
    BundleCheck,
    BundleDefinition,
    BundleReport,
    CheckOutcome,
    ExperimentConfig,
)
from com.mhire.app.services.latent_attack.latent_attack import InfectionResult, default_mask, infect
from com.mhire.app.services.latent_attack.latent_attack_schema import TriggerSpec
from com.mhire.app.services.latent_attack.trigger_io import export_trigger_png, load_trigger, save_trigger
from com.mhire.app.services.model_zoo.model_io import load_model, save_model
from com.mhire.app.services.model_zoo.model_trainer import TrainingHistory, fit_classifier
from com.mhire.app.services.model_zoo.model_zoo import ModelGraph, build_digit_teacher, build_toy_teacher
from com.mhire.app.services.transfer_learn.transfer_learn import build_student, fine_tune, verify_live_backdoor

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

BUNDLES_PATH = Path(__file__).with_name("bundles.json")
TEACHER_FILE = "teacher.lbd"
INFECTED_FILE = "infected_teacher.lbd"
STUDENT_FILE = "student.lbd"
TRIGGER_FILE = "trigger.lbt"


@dataclass
class Trial:
    """One infect -> transfer -> evaluate pass."""

    infection: InfectionResult
    student: ModelGraph
    records: List[MetricsRecord]  # one per trigger
    split: DataSplit


def _write_text(payload: str, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(payload)
    except OSError as e:
        logger.error(f"Error writing {path}: {str(e)}")
        raise ArtifactIOError("io-error", f"cannot write {path}: {e}")


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, fallback: bool = False):
        self.config = config
        self.out = output_dir(config)
        # fall back to synthetic data when the IDX files are missing
        self.fallback = fallback
        self.synthetic = config.data.source == "synthetic"
        self._mnist: Optional[Tuple[LabeledDataset, LabeledDataset]] = None
        self._clean_teacher: Optional[ModelGraph] = None
        self._baseline_accuracy: Optional[float] = None
        self.workers = config.experiment.workers or Config().workers

    # data and models

    @property
    def mask_fraction(self) -> float:
        return self.config.data.synthetic_mask_fraction if self.synthetic else self.config.attack.mask_fraction

    def _mnist_pools(self) -> Optional[Tuple[LabeledDataset, LabeledDataset]]:
        if self._mnist is not None:
            return self._mnist
        data = self.config.data
        settings = Config()
        paths = [settings.resolve_data_path(p) for p in
                 (data.train_images, data.train_labels, data.test_images, data.test_labels)]
        missing = [p for p in paths if not p.is_file()]
        if missing:
            if not self.fallback:
                raise DataError("data-load", f"missing dataset file {missing[0]}")
            logger.warning(f"Dataset file {missing[0]} not found, falling back to synthetic data")
            return None
        self._mnist = (
            load_idx(paths[0], paths[1], id_offset=TRAIN_ID_OFFSET),
            load_idx(paths[2], paths[3], id_offset=TEST_ID_OFFSET),
        )
        return self._mnist

    def load_split(self, seed: Optional[int] = None, target_count: Optional[int] = None) -> DataSplit:
        data = self.config.data
        seed = self.config.experiment.seed if seed is None else seed
        target_count = data.target_count if target_count is None else target_count
        pools = self._mnist_pools() if data.source == "mnist" else None
        if pools is None:
            self.synthetic = True
            return make_synthetic_split(
                seed,
                target_label=data.target_label,
                target_count=target_count,
                per_class=data.synthetic_per_class,
                test_per_class=data.synthetic_test_per_class,
                image_side=data.image_side,
                eval_count=data.eval_count,
                nontarget_count=data.nontarget_count,
                student_count=data.student_count,
            )
        return make_digit_split(
            pools[0], pools[1], data.target_label, target_count, seed,
            nontarget_count=data.nontarget_count, student_count=data.student_count, eval_count=data.eval_count,
        )

    def build_teacher(self, split: DataSplit) -> ModelGraph:
        classes = len(split.teacher_label_map)
        seed = self.config.experiment.seed
        if self.config.experiment.task == "toy":
            return build_toy_teacher(split.x_nontarget.image_shape, classes, seed=seed)
        return build_digit_teacher(classes=classes, seed=seed)

    def train_teacher(self, split: DataSplit) -> Tuple[ModelGraph, TrainingHistory, float]:
        teacher = self.build_teacher(split)
        x = split.x_nontarget
        teacher, history = fit_classifier(teacher, x.images, x.labels, teacher_sgd(self.config), stage="teacher")
        accuracy = clean_accuracy(teacher, split.x_eval)
        logger.info(f"Teacher {teacher.name}: held-out accuracy {accuracy:.4f}")
        return teacher, history, accuracy

    def clean_teacher(self, split: DataSplit) -> ModelGraph:
        if self._clean_teacher is None:
            self._clean_teacher, _, _ = self.train_teacher(split)
        return self._clean_teacher

    def infect(
        self,
        teacher: ModelGraph,
        split: DataSplit,
        x_targets: Optional[Sequence[LabeledDataset]] = None,
        inject_layer: Optional[int] = None,
        x_nontarget: Optional[LabeledDataset] = None,
        seed_offset: int = 0,
        optimize_trigger: Optional[bool] = None,
    ) -> InfectionResult:
        config = self.config
        x_targets = list(x_targets) if x_targets is not None else [split.x_target]
        injection = injection_config(config)
        injection = injection.model_copy(update={
            "trigger": injection.trigger.model_copy(update={"seed": injection.trigger.seed + seed_offset}),
        })
        optimize = config.trigger.init == "optimized" if optimize_trigger is None else optimize_trigger
        if not optimize:
            injection = injection.model_copy(update={"enforce_feature_gap": False})
        inverse = split.inverse_student_map()
        return infect(
            teacher,
            x_targets,
            split.x_nontarget if x_nontarget is None else x_nontarget,
            config.attack.inject_layer if inject_layer is None else inject_layer,
            retrain_sgd(config),
            injection,
            masks=[default_mask(teacher.input_shape, self.mask_fraction) for _ in x_targets],
            target_names=[str(inverse[int(t.labels[0])]) for t in x_targets],
            seed=config.experiment.seed + seed_offset,
            optimize_trigger=optimize,
        )

    def transfer(self, teacher: ModelGraph, split: DataSplit, frozen_layers: Optional[int] = None,
                 x_student: Optional[LabeledDataset] = None) -> Tuple[ModelGraph, TrainingHistory]:
        cfg = transfer_config(self.config, len(split.student_label_map))
        if frozen_layers is not None:
            cfg = cfg.model_copy(update={"frozen_layers": frozen_layers})
        return fine_tune(build_student(teacher, cfg), split.x_student if x_student is None else x_student, cfg)

    def baseline_accuracy(self, split: DataSplit) -> float:
        """Clean accuracy of a student built from the clean teacher with the same protocol."""
        if self._baseline_accuracy is None:
            student, _ = self.transfer(self.clean_teacher(split), split)
            self._baseline_accuracy = clean_accuracy(student, split.student_test)
            logger.info(f"Clean-teacher student accuracy {self._baseline_accuracy:.4f}")
        return self._baseline_accuracy

    def trial(
        self,
        split: DataSplit,
        run: int = 0,
        seed: Optional[int] = None,
        extra_targets: int = 0,
        inject_layer: Optional[int] = None,
        frozen_layers: Optional[int] = None,
        x_nontarget: Optional[LabeledDataset] = None,
        optimize_trigger: Optional[bool] = None,
        sweep_param: Optional[float] = None,
    ) -> Trial:
        seed = self.config.experiment.seed if seed is None else seed
        x_targets, x_student = [split.x_target], split.x_student
        if extra_targets:
            labels = [i for i in sorted(split.student_label_map.values(), reverse=True)
                      if i != split.target_student_index][:extra_targets]
            extras, x_student = carve_targets(x_student, labels, len(split.x_target), seed)
            x_targets += extras
        teacher = self.clean_teacher(split)
        infection = self.infect(teacher, split, x_targets, inject_layer, x_nontarget, seed_offset=run,
                                optimize_trigger=optimize_trigger)
        student, _ = self.transfer(infection.teacher, split, frozen_layers, x_student)
        records = [
            measure(student, trigger, split.x_eval, split.student_test, trigger.target_label, seed,
                    self.config.experiment.name, run=run, sweep_param=sweep_param)
            for trigger in infection.triggers
        ]
        return Trial(infection=infection, student=student, records=records, split=split)

    # commands

    def cmd_train_teacher(self) -> Path:
        split = self.load_split()
        teacher, history, accuracy = self.train_teacher(split)
        teacher.metadata["heldout_accuracy"] = accuracy
        path = self.out / TEACHER_FILE
        save_model(teacher, path)
        _write_text(history.model_dump_json(indent=2), self.out / "teacher_history.json")
        save_config(self.config, self.out / "experiment.ini")
        return path

    def cmd_infect(self, teacher_path: Path) -> Tuple[Path, Path]:
        split = self.load_split()
        teacher = load_model(teacher_path)
        result = self.infect(teacher, split)
        model_path, trigger_path = self.out / INFECTED_FILE, self.out / TRIGGER_FILE
        save_model(result.teacher, model_path)
        save_trigger(result.triggers[0], trigger_path)
        for i, trigger in enumerate(result.triggers[1:], start=1):
            save_trigger(trigger, self.out / f"trigger_{i}.lbt")
        export_trigger_png(result.triggers[0], self.out / "trigger.png", sample=split.x_eval.images[0])
        _write_text(result.report.model_dump_json(indent=2), self.out / "infection_report.json")
        return model_path, trigger_path

    def cmd_transfer(self, teacher_path: Path) -> Path:
        split = self.load_split()
        student, history = self.transfer(load_model(teacher_path), split)
        path = self.out / STUDENT_FILE
        save_model(student, path)
        _write_text(history.model_dump_json(indent=2), self.out / "transfer_history.json")
        return path

    def cmd_evaluate(self, student_path: Path, trigger_path: Path, teacher_path: Optional[Path] = None) -> Path:
        split = self.load_split()
        student, trigger = load_model(student_path), load_trigger(trigger_path)
        target = split.target_student_index if trigger.target_label is None else trigger.target_label
        record = measure(student, trigger, split.x_eval, split.student_test, target, self.config.experiment.seed,
                         self.config.experiment.name)
        cross_check = poisoned_test_success_rate(student, trigger, split.student_test, target)
        logger.info(f"Success on X_eval {record.attack_success_rate:.4f}, on poisoned student test {cross_check:.4f}")
        write_metrics_csv([record], self.out / "metrics.csv")
        write_summary_json(aggregate([record], self.config.experiment.name, self.config.experiment.seed),
                           self.out / "summary.json")
        if teacher_path is not None:
            report = verify_live_backdoor(load_model(teacher_path), student, trigger, split.x_eval, split.x_target,
                                          target)
            _write_text(report.model_dump_json(indent=2), self.out / "live_backdoor_report.json")
        return self.out / "metrics.csv"

    def cmd_defend(self, defense: str, trigger_path: Path, student_path: Optional[Path] = None,
                   teacher_path: Optional[Path] = None) -> Path:
        split = self.load_split()
        trigger = load_trigger(trigger_path)
        target = split.target_student_index if trigger.target_label is None else trigger.target_label
        if defense == "multilayer":
            if teacher_path is None:
                raise ConfigError("missing-artifact", "multilayer tuning needs --teacher")
            result = self.multilayer(load_model(teacher_path), split, trigger, target)
        else:
            if student_path is None:
                raise ConfigError("missing-artifact", f"{defense} needs --student")
            student = load_model(student_path)
            result = self.fine_prune(student, split, trigger, target) if defense == "fine-prune" \
                else self.blur(student, split, trigger, target)
        path = self.out / f"defense_{defense}.csv"
        write_sweep_csv(result, path)
        _write_text(result.model_dump_json(indent=2), self.out / f"defense_{defense}.json")
        return path

    # defense sweeps with config values

    def fine_prune(self, student: ModelGraph, split: DataSplit, trigger: TriggerSpec, target: int,
                   fractions: Optional[Sequence[float]] = None) -> DefenseSweepResult:
        defense = self.config.defense
        return fine_prune_sweep(
            student, trigger, split.x_student, split.x_eval, split.student_test, target,
            self.config.transfer.sgd(self.config.experiment.seed),
            fractions=defense.prune_fractions if fractions is None else fractions,
            layer=defense.prune_layer,
            experiment_id=self.config.experiment.name,
            workers=self.workers,
        )

    def blur(self, student: ModelGraph, split: DataSplit, trigger: TriggerSpec, target: int,
             kernels: Optional[Sequence[int]] = None) -> DefenseSweepResult:
        defense = self.config.defense
        return blur_defense_sweep(
            student, trigger, split.x_eval, split.student_test, target,
            kernel_sizes=defense.blur_kernels if kernels is None else kernels,
            sigma_ratio=defense.blur_sigma_ratio,
            seed=self.config.experiment.seed,
            experiment_id=self.config.experiment.name,
            workers=self.workers,
        )

    def multilayer(self, teacher: ModelGraph, split: DataSplit, trigger: TriggerSpec, target: int,
                   counts: Optional[Sequence[int]] = None) -> DefenseSweepResult:
        return multilayer_tuning_sweep(
            teacher, split.x_student, trigger, split.x_eval, split.student_test, target,
            self.config.defense.tuning_frozen_counts if counts is None else counts,
            transfer_config(self.config, len(split.student_label_map)),
            experiment_id=self.config.experiment.name,
            workers=self.workers,
        )


def load_bundles(path: Path = BUNDLES_PATH) -> Dict[str, BundleDefinition]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Error reading bundle definitions {path}: {str(e)}")
        raise ConfigError("bad-bundles", f"cannot read {path}: {e}")
    bundles = {name: BundleDefinition.model_validate(body) for name, body in raw.items()}
    seen = set(bundles)
    for name, bundle in bundles.items():
        for alias in bundle.aliases:
            if alias in seen:
                raise ConfigError("bad-bundles", f"alias {alias} of {name} is already taken")
            seen.add(alias)
    return bundles


def bundle_names(bundles: Dict[str, BundleDefinition]) -> List[str]:
    """Canonical names and their aliases, for the command line."""
    return sorted(set(bundles) | {alias for b in bundles.values() for alias in b.aliases})


def resolve_bundle(name: str, bundles: Dict[str, BundleDefinition]) -> str:
    if name in bundles:
        return name
    for canonical, bundle in bundles.items():
        if name in bundle.aliases:
            return canonical
    raise ConfigError("unknown-bundle", f"{name} is not one of {', '.join(bundle_names(bundles))}")


def _apply_overrides(config: ExperimentConfig, overrides: Dict[str, Dict[str, str]]) -> ExperimentConfig:
    merged = config.model_dump(by_alias=True)
    for section, values in overrides.items():
        if section not in merged:
            raise ConfigError("unknown-section", f"bundle override for [{section}]")
        merged[section].update(values)
    return ExperimentConfig.model_validate(merged)


class BundleRunner:
    """Runs one reproduction bundle and writes its CSVs and markdown report."""

    def __init__(self, name: str, config: ExperimentConfig, bundles: Optional[Dict[str, BundleDefinition]] = None):
        bundles = load_bundles() if bundles is None else bundles
        self.name = name = resolve_bundle(name, bundles)
        self.bundle = bundles[name]
        self.config = _apply_overrides(config, self.bundle.overrides)
        self.runner = ExperimentRunner(self.config, fallback=True)
        self.out = output_dir(self.config) / name
        self.frames: Dict[str, pd.DataFrame] = {}
        self.findings: List[str] = []

    def run(self) -> BundleReport:
        logger.info(f"Reproducing {self.name}: {self.bundle.description}")
        split = self.runner.load_split()
        measurements = getattr(self, "_" + self.name.replace("-", "_"))(split)
        outcomes = [self._check(c, measurements) for c in self.bundle.checks]
        report = BundleReport(
            bundle=self.name,
            description=self.bundle.description,
            synthetic_fallback=self.runner.synthetic,
            outcomes=outcomes,
            findings=self.findings,
            measurements=measurements,
        )
        for name, frame in self.frames.items():
            try:
                self.out.mkdir(parents=True, exist_ok=True)
                frame.to_csv(self.out / f"{name}.csv", index=False)
            except OSError as e:
                logger.error(f"Error writing {name}.csv: {str(e)}")
                raise ArtifactIOError("io-error", f"cannot write {self.out / name}.csv: {e}")
        _write_text(report.model_dump_json(indent=2), self.out / "report.json")
        _write_text(render_report(report), self.out / "report.md")
        logger.info(f"Bundle {self.name}: {'PASS' if report.passed else 'FAIL'}")
        return report

    @staticmethod
    def _check(check: BundleCheck, measurements: Dict[str, float]) -> CheckOutcome:
        measured = measurements.get(check.metric)
        compare = {"ge": np.greater_equal, "le": np.less_equal, "lt": np.less, "gt": np.greater}[check.op]
        passed = measured is not None and bool(compare(measured, check.threshold))
        return CheckOutcome(metric=check.metric, measured=measured, op=check.op, threshold=check.threshold,
                            reference=check.reference, passed=passed)

    def _param(self, name: str, default: List[float]) -> List[float]:
        return self.bundle.params.get(name, default)

    def _seeds(self) -> List[int]:
        return [derive_seed(self.config.experiment.seed, run) for run in range(self.bundle.runs)]

    # bundles

    def _multi_image(self, split: DataSplit) -> Dict[str, float]:
        baseline = self.runner.baseline_accuracy(split)
        trial = self.runner.trial(split)
        record = trial.records[0]
        self.frames["metrics"] = records_frame(trial.records)
        report = verify_live_backdoor(trial.infection.teacher, trial.student, trial.infection.triggers[0],
                               split.x_eval, split.x_target, split.target_student_index)
        self.findings += report.findings
        return {
            "attack_success_rate": record.attack_success_rate,
            "clean_accuracy": record.clean_accuracy,
            "baseline_accuracy": baseline,
            "accuracy_gap": baseline - record.clean_accuracy,
            "student_test_success_rate": poisoned_test_success_rate(
                trial.student, trial.infection.triggers[0], split.student_test, split.target_student_index),
        }

    def _single_image(self, split: DataSplit) -> Dict[str, float]:
        baseline = self.runner.baseline_accuracy(split)
        multi = self.runner.trial(split).records[0]
        records = []
        for run, seed in enumerate(self._seeds()):
            single_split = self.runner.load_split(seed=seed, target_count=1)
            records.append(self.runner.trial(single_split, run=run, seed=seed).records[0])
        summary = aggregate(records, self.name, self.config.experiment.seed)
        self.frames["metrics"] = records_frame(records)
        return {
            "mean_attack_success_rate": summary.mean_attack_success_rate,
            "min_attack_success_rate": summary.min_attack_success_rate,
            "max_attack_success_rate": summary.max_attack_success_rate,
            "multi_image_success_rate": multi.attack_success_rate,
            "single_minus_multi": summary.mean_attack_success_rate - multi.attack_success_rate,
            "accuracy_gap": baseline - summary.mean_clean_accuracy,
        }

    def _random_trigger(self, split: DataSplit) -> Dict[str, float]:
        optimized = self.runner.trial(split).records[0]
        trials = int(self._param("trials", [20])[0])
        records = [
            self.runner.trial(split, run=run, optimize_trigger=False, sweep_param=float(run)).records[0]
            for run in range(1, trials + 1)
        ]
        self.frames["random_triggers"] = records_frame(records)
        self.frames["optimized_trigger"] = records_frame([optimized])
        return {
            "random_median_success": float(np.median([r.attack_success_rate for r in records])),
            "random_max_success": float(np.max([r.attack_success_rate for r in records])),
            "optimized_success": optimized.attack_success_rate,
        }

    def _multi_target(self, split: DataSplit) -> Dict[str, float]:
        baseline = self.runner.baseline_accuracy(split)
        rows, per_count = [], {}
        for count in (int(c) for c in self._param("target_counts", [1, 2, 3])):
            successes, accuracies = [], []
            for run, seed in enumerate(self._seeds()):
                trial = self.runner.trial(split, run=run, seed=seed, extra_targets=count - 1,
                                          sweep_param=float(count))
                rows += trial.records
                successes.append(np.mean([r.attack_success_rate for r in trial.records]))
                accuracies.append(trial.records[0].clean_accuracy)
            per_count[count] = (float(np.mean(successes)), float(np.mean(accuracies)))
        self.frames["metrics"] = records_frame(rows)
        counts = sorted(per_count)
        measurements = {f"success_{c}_targets": per_count[c][0] for c in counts}
        measurements["first_minus_last_success"] = per_count[counts[0]][0] - per_count[counts[-1]][0]
        measurements["max_accuracy_gap"] = max(baseline - acc for _, acc in per_count.values())
        return measurements

    def _fine_prune(self, split: DataSplit) -> Dict[str, float]:
        trial = self.runner.trial(split)
        trigger = trial.infection.triggers[0]
        fractions = sorted(set(self._param("fractions", self.config.defense.prune_fractions)) | {0.0})
        result = self.runner.fine_prune(trial.student, split, trigger, split.target_student_index, fractions)
        self.frames["fine_prune"] = result.frame()
        self.findings += result.findings
        zero = next(p for p in result.points if p.sweep_param == 0.0)
        return {
            "fraction0_abs_delta": abs(zero.attack_success_rate - result.baseline_success)
            + abs(zero.clean_accuracy - result.baseline_accuracy),
            "shape_violations": float(len(result.findings)),
            "min_success": min(p.attack_success_rate for p in result.points),
        }

    def _blur(self, split: DataSplit) -> Dict[str, float]:
        trial = self.runner.trial(split)
        kernels = sorted({int(k) for k in self._param("kernels", self.config.defense.blur_kernels)} | {1})
        result = self.runner.blur(trial.student, split, trial.infection.triggers[0], split.target_student_index,
                                  kernels)
        self.frames["blur"] = result.frame()
        self.findings += result.findings
        first = result.points[0]
        rises = [0.0]
        lowest = first.attack_success_rate
        for p in result.points[1:]:
            rises.append(p.attack_success_rate - lowest)
            lowest = min(lowest, p.attack_success_rate)
        return {
            "kernel1_abs_delta": abs(first.attack_success_rate - result.baseline_success)
            + abs(first.clean_accuracy - result.baseline_accuracy),
            "max_success_rise": max(rises),
            "accuracy_drop": first.clean_accuracy - result.points[-1].clean_accuracy,
        }

    def _multilayer_tuning(self, split: DataSplit) -> Dict[str, float]:
        trial = self.runner.trial(split)
        trigger = trial.infection.triggers[0]
        counts = [int(k) for k in self._param("frozen_counts", self.config.defense.tuning_frozen_counts)]
        result = self.runner.multilayer(trial.infection.teacher, split, trigger, split.target_student_index, counts)
        self.frames["multilayer"] = result.frame()
        self.findings += result.findings
        below = [p.attack_success_rate for p in result.points if p.sweep_param < trigger.inject_layer]
        above = [abs(p.attack_success_rate - result.baseline_success)
                 for p in result.points if p.sweep_param >= trigger.inject_layer]
        return {
            "max_success_below_kt": max(below, default=0.0),
            "max_gap_at_or_above_kt": max(above, default=0.0),
            "undefended_success": result.baseline_success,
        }

    def _layer_sweep(self, split: DataSplit) -> Dict[str, float]:
        rows, measurements = [], {}
        for k_t in (int(k) for k in self._param("inject_layers", [2, 3])):
            for k in (int(k) for k in self._param("frozen_layers", [2, 3])):
                if k < k_t:
                    continue
                record = self.runner.trial(split, inject_layer=k_t, frozen_layers=k).records[0]
                rows.append({"inject_layer": k_t, "frozen_layers": k, **record.model_dump()})
                measurements[f"success_kt{k_t}_k{k}"] = record.attack_success_rate
                measurements[f"accuracy_kt{k_t}_k{k}"] = record.clean_accuracy
        self.frames["layer_sweep"] = pd.DataFrame(rows)
        return measurements

    def _nontarget_data(self, split: DataSplit) -> Dict[str, float]:
        full_classes = len(split.teacher_label_map)
        grid = [(int(c), None) for c in self._param("classes", [2, full_classes])]
        grid += [(full_classes, int(n)) for n in self._param("per_class", [4, 50])]
        rows, measurements = [], {}
        for classes, per_class in grid:
            x_nontarget = limit_classes(split.x_nontarget, classes, per_class, self.config.experiment.seed)
            record = self.runner.trial(split, x_nontarget=x_nontarget).records[0]
            key = f"c{classes}" + ("" if per_class is None else f"_n{per_class}")
            rows.append({"classes": classes, "per_class": per_class or 0, **record.model_dump()})
            measurements[f"success_{key}"] = record.attack_success_rate
        self.frames["nontarget_sweep"] = pd.DataFrame(rows)
        fewest = min(c for c, n in grid if n is None)
        measurements["more_classes_gain"] = (measurements[f"success_c{full_classes}"]
                                             - measurements[f"success_c{fewest}"])
        return measurements


def render_report(report: BundleReport) -> str:
    lines = [
        f"# {report.bundle}",
        "",
        report.description,
        "",
        f"Data: {'synthetic fallback (MNIST not found)' if report.synthetic_fallback else 'MNIST'}",
        "",
        "| metric | measured | check | reference | result |",
        "|---|---|---|---|---|",
    ]
    for o in report.outcomes:
        measured = "n/a" if o.measured is None else f"{o.measured:.4f}"
        lines.append(f"| {o.metric} | {measured} | {o.op} {o.threshold:g} | {o.reference or ''} | "
                     f"{'PASS' if o.passed else 'FAIL'} |")
    lines += ["", "## Measurements", ""]
    lines += [f"- {name}: {value:.4f}" for name, value in sorted(report.measurements.items())]
    if report.findings:
        lines += ["", "## Findings", ""]
        lines += [f"- {finding}" for finding in report.findings]
    return "\n".join(lines) + "\n"


def cmd_reproduce(bundle: str, config: Optional[ExperimentConfig] = None) -> BundleReport:
    return BundleRunner(bundle, config or ExperimentConfig()).run()
