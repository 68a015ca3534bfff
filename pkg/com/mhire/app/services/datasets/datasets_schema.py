from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from com.mhire.app.config.errors import DataError


class LabeledDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    images: np.ndarray  # [n, channels, height, width], float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    class_count: int
    sample_ids: np.ndarray  # [n] int64 identity of each sample in its source

    @model_validator(mode="after")
    def check_invariants(self) -> "LabeledDataset":
        n = self.images.shape[0]
        if self.images.ndim != 4 or n < 1:
            raise DataError("empty-dataset", f"expected [n>=1, c, h, w] images, got {self.images.shape}")
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise DataError("count-mismatch", f"{n} images, {self.labels.shape[0]} labels, {self.sample_ids.shape[0]} ids")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError("label-out-of-range", f"labels must lie in [0, {self.class_count})")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DataError("pixel-range", "pixels must lie in [0, 1]")
        return self

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[idx], labels=self.labels[idx], class_count=self.class_count, sample_ids=self.sample_ids[idx]
        )


class DataSplit(BaseModel):
    """The four disjoint attack datasets plus the student test pool and the relabeling maps."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    target_label: int  # y_t in the original label space
    target_student_index: int  # y_t in the student label space
    x_target: LabeledDataset
    x_nontarget: LabeledDataset
    x_student: LabeledDataset
    x_eval: LabeledDataset
    student_test: LabeledDataset
    teacher_label_map: Dict[int, int]  # original label -> teacher task label
    student_label_map: Dict[int, int]  # original label -> student task label

    def members(self) -> Dict[str, LabeledDataset]:
        return {
            "x_target": self.x_target,
            "x_nontarget": self.x_nontarget,
            "x_student": self.x_student,
            "x_eval": self.x_eval,
            "student_test": self.student_test,
        }

    def inverse_student_map(self) -> Dict[int, int]:
        return {v: k for k, v in self.student_label_map.items()}

    def inverse_teacher_map(self) -> Dict[int, int]:
        return {v: k for k, v in self.teacher_label_map.items()}
