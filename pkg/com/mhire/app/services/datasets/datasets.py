"""
IDX ingestion and construction of the disjoint attack datasets.

IDX layout: a 4-byte big-endian magic whose last byte is the number of
dimensions (0x00000803 for image files, 0x00000801 for label files),
followed by one big-endian uint32 per dimension, then raw unsigned bytes.
"""
import gzip
import logging
import math
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from com.mhire.app.config.errors import DataError, InputError
from com.mhire.app.services.datasets.datasets_schema import DataSplit, LabeledDataset

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_ID_OFFSET = 0
TEST_ID_OFFSET = 1_000_000
DIGIT_TEACHER_CLASSES = (0, 1, 2, 3, 4)
DIGIT_STUDENT_CLASSES = (5, 6, 7, 8, 9)
GLYPH_GRID = 4
GLYPH_SEED = 7
GLYPH_ATTEMPTS = 100_000


def _read_bytes(path: Path) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading IDX file {path}: {str(e)}")
        raise DataError("data-load", f"cannot read {path}: {e}")
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path: Path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError("truncated-file", f"{path} has no IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError("bad-magic", f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError("truncated-file", f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    if len(raw) - header_len < count:
        raise DataError("truncated-file", f"{path}: expected {count} data bytes, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx(images_path: Path, labels_path: Path, class_count: int = 10, id_offset: int = 0) -> LabeledDataset:
    """Read an IDX image/label pair into a dataset of shape [n, 1, rows, cols], pixels scaled into [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError("count-mismatch", f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n = images.shape[0]
    logger.info(f"Loaded {n} samples of {images.shape[1:]} from {images_path}")
    return LabeledDataset(
        images=(images.astype(np.float64) / 255.0).reshape(n, 1, *images.shape[1:]),
        labels=labels.astype(np.int64),
        class_count=class_count,
        sample_ids=np.arange(n, dtype=np.int64) + id_offset,
    )


def _sample(rng: np.random.Generator, pool: np.ndarray, count: Optional[int]) -> np.ndarray:
    if count is None or count >= pool.size:
        return pool
    return np.sort(rng.choice(pool, size=count, replace=False))


def _relabel(dataset: LabeledDataset, idx: np.ndarray, mapping: Dict[int, int]) -> LabeledDataset:
    lookup = np.full(dataset.class_count, -1, dtype=np.int64)
    for original, task in mapping.items():
        lookup[original] = task
    return LabeledDataset(
        images=dataset.images[idx],
        labels=lookup[dataset.labels[idx]],
        class_count=len(mapping),
        sample_ids=dataset.sample_ids[idx],
    )


def assert_disjoint(split: DataSplit) -> None:
    members = split.members()
    names = list(members)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            overlap = np.intersect1d(members[a].sample_ids, members[b].sample_ids)
            if overlap.size:
                raise DataError("overlapping-split", f"{a} and {b} share {overlap.size} samples")


def make_transfer_split(
    train: LabeledDataset,
    test: LabeledDataset,
    teacher_classes: Sequence[int],
    student_classes: Sequence[int],
    target_label: int,
    target_count: int,
    seed: int,
    nontarget_count: Optional[int] = None,
    student_count: Optional[int] = None,
    eval_count: int = 5000,
) -> DataSplit:
    """
    Teacher side: X_nontarget from the training pool of `teacher_classes`,
    X_eval from the held-out test pool of the same classes. Student side:
    X_target is `target_count` training samples of `target_label`, removed
    from X_student, which holds the rest of the `student_classes` pool.
    """
    if target_label not in student_classes:
        raise DataError("invalid-target", f"target {target_label} is not a student class {list(student_classes)}")
    if target_count < 1:
        raise DataError("insufficient-target-samples", "target count must be at least 1")
    rng = np.random.default_rng(seed)
    teacher_map = {c: i for i, c in enumerate(teacher_classes)}
    student_map = {c: i for i, c in enumerate(student_classes)}

    target_pool = np.flatnonzero(train.labels == target_label)
    if target_count > target_pool.size:
        raise DataError(
            "insufficient-target-samples", f"asked for {target_count} samples of {target_label}, only {target_pool.size}"
        )
    target_idx = np.sort(rng.choice(target_pool, size=target_count, replace=False))
    nontarget_idx = _sample(rng, np.flatnonzero(np.isin(train.labels, teacher_classes)), nontarget_count)
    student_pool = np.setdiff1d(np.flatnonzero(np.isin(train.labels, student_classes)), target_idx)
    student_idx = _sample(rng, student_pool, student_count)
    eval_idx = _sample(rng, np.flatnonzero(np.isin(test.labels, teacher_classes)), eval_count)
    student_test_idx = np.flatnonzero(np.isin(test.labels, student_classes))
    for name, idx in (("x_nontarget", nontarget_idx), ("x_student", student_idx), ("x_eval", eval_idx),
                      ("student_test", student_test_idx)):
        if idx.size == 0:
            raise DataError("empty-dataset", f"{name} would be empty")

    split = DataSplit(
        target_label=target_label,
        target_student_index=student_map[target_label],
        x_target=_relabel(train, target_idx, student_map),
        x_nontarget=_relabel(train, nontarget_idx, teacher_map),
        x_student=_relabel(train, student_idx, student_map),
        x_eval=_relabel(test, eval_idx, teacher_map),
        student_test=_relabel(test, student_test_idx, student_map),
        teacher_label_map=teacher_map,
        student_label_map=student_map,
    )
    assert_disjoint(split)
    logger.info(
        f"Split y_t={target_label}: |X_target|={len(split.x_target)} |X_nontarget|={len(split.x_nontarget)} "
        f"|X_student|={len(split.x_student)} |X_eval|={len(split.x_eval)} |student_test|={len(split.student_test)}"
    )
    return split


def make_digit_split(
    mnist_train: LabeledDataset,
    mnist_test: LabeledDataset,
    target_label: int,
    target_count: int,
    seed: int,
    **kwargs,
) -> DataSplit:
    """Digit task: teacher on digits 0-4, student on digits 5-9 relabeled to 0-4."""
    if target_label not in DIGIT_STUDENT_CLASSES:
        raise DataError("invalid-target", f"digit target must be in 5..9, got {target_label}")
    return make_transfer_split(
        mnist_train, mnist_test, DIGIT_TEACHER_CLASSES, DIGIT_STUDENT_CLASSES, target_label, target_count, seed, **kwargs
    )


def glyph_codes(classes: int, grid: int = GLYPH_GRID, min_distance: int = 4) -> np.ndarray:
    """
    One on/off layout per class over a `grid` x `grid` board of blob slots.
    Drawn from a fixed generator, so every split and seed shares the glyphs.
    """
    rng = np.random.default_rng(GLYPH_SEED)
    codes: List[np.ndarray] = []
    for _ in range(GLYPH_ATTEMPTS):
        if len(codes) == classes:
            break
        code = rng.random((grid, grid)) < 0.5
        if code.sum() < grid or any(np.sum(code != c) < min_distance for c in codes):
            continue
        codes.append(code)
    if len(codes) < classes:
        raise InputError("invalid-argument", f"cannot draw {classes} distinct glyphs on a {grid}x{grid} board")
    return np.stack(codes)


def make_synthetic(
    classes: int, per_class: int, image_side: int, seed: int, channels: int = 1, noise: float = 0.1,
    id_offset: int = 0,
) -> LabeledDataset:
    """
    Digit-like toy images. Each class lights its own fixed set of square
    blobs on a coarse board spanning the whole image (see `glyph_codes`);
    every blob gets its own seeded brightness, on top of seeded uniform
    noise. Labels come out balanced.
    """
    if classes < 1 or per_class < 1 or image_side < 1 or channels < 1:
        raise InputError("invalid-argument", "classes, per_class, image_side and channels must be positive")
    cell = image_side // GLYPH_GRID
    if cell < 2:
        raise InputError("invalid-argument", f"image side {image_side} too small for a {GLYPH_GRID}x{GLYPH_GRID} board")
    blob = max(1, (2 * cell) // 3)
    pad = (cell - blob) // 2
    codes = glyph_codes(classes)
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = rng.uniform(0.0, noise, size=(n, channels, image_side, image_side))
    brightness = rng.uniform(0.7, 1.0, size=(n, GLYPH_GRID, GLYPH_GRID)) * codes[labels]
    for row in range(GLYPH_GRID):
        for col in range(GLYPH_GRID):
            top, left = row * cell + pad, col * cell + pad
            images[:, :, top:top + blob, left:left + blob] += brightness[:, row, col, None, None, None]
    return LabeledDataset(
        images=np.clip(images, 0.0, 1.0),
        labels=labels,
        class_count=classes,
        sample_ids=np.arange(n, dtype=np.int64) + id_offset,
    )


def make_synthetic_split(
    seed: int,
    target_label: int = 5,
    target_count: int = 45,
    per_class: int = 120,
    test_per_class: int = 40,
    image_side: int = 28,
    eval_count: int = 5000,
    nontarget_count: Optional[int] = None,
    student_count: Optional[int] = None,
) -> DataSplit:
    """A ten-class synthetic stand-in for the Digit task (classes 0-4 teacher side, 5-9 student side)."""
    train = make_synthetic(10, per_class, image_side, seed, id_offset=TRAIN_ID_OFFSET)
    test = make_synthetic(10, test_per_class, image_side, seed + 1, id_offset=TEST_ID_OFFSET)
    return make_digit_split(
        train, test, target_label, target_count, seed,
        eval_count=eval_count, nontarget_count=nontarget_count, student_count=student_count,
    )


def carve_targets(
    pool: LabeledDataset, labels: Sequence[int], count: int, seed: int
) -> Tuple[List[LabeledDataset], LabeledDataset]:
    """Draw `count` samples of each label out of `pool`; returns the target sets and what is left of the pool."""
    rng = np.random.default_rng(seed)
    taken: List[np.ndarray] = []
    for label in labels:
        candidates = np.flatnonzero(pool.labels == label)
        if count < 1 or count > candidates.size:
            raise DataError("insufficient-target-samples", f"asked for {count} samples of {label}, only {candidates.size}")
        taken.append(np.sort(rng.choice(candidates, size=count, replace=False)))
    rest = np.setdiff1d(np.arange(len(pool)), np.concatenate(taken))
    if rest.size == 0:
        raise DataError("empty-dataset", "no samples left after carving targets")
    return [pool.subset(idx) for idx in taken], pool.subset(rest)


def limit_classes(dataset: LabeledDataset, classes: int, per_class: Optional[int], seed: int) -> LabeledDataset:
    """Keep labels 0..classes-1 and at most `per_class` samples of each. The declared class count is unchanged."""
    if not 1 <= classes <= dataset.class_count:
        raise InputError("invalid-argument", f"classes must be in 1..{dataset.class_count}, got {classes}")
    rng = np.random.default_rng(seed)
    keep = [_sample(rng, np.flatnonzero(dataset.labels == c), per_class) for c in range(classes)]
    idx = np.sort(np.concatenate(keep))
    if idx.size == 0:
        raise DataError("empty-dataset", f"no samples for the first {classes} classes")
    return dataset.subset(idx)
