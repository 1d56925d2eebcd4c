"""Dataset ingestion and task-stream construction.

Images arrive in the classic IDX binary layout (big-endian magic, then
big-endian 32-bit dimension sizes, then unsigned bytes); pixels are scaled
to [0, 1].  Task streams come in three flavors: pixel-permutation tasks
over one base dataset, class-pair splits, and synthetic two-blob tasks for
fast desk-scale experiments.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Array, SeededRng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, or size mismatch)."""


@dataclass
class Dataset:
    inputs: Array   # (n, d) float64 in [0, 1]
    labels: Array   # (n,) int64 class indices
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        if not np.isfinite(self.inputs).all():
            raise ValueError("non-finite input values")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class Task:
    train: Dataset
    test: Dataset
    head: int


@dataclass
class TaskStream:
    tasks: list
    single_head: bool

    @property
    def input_dim(self) -> int:
        return self.tasks[0].train.inputs.shape[1]

    def validate(self):
        d = self.input_dim
        for i, t in enumerate(self.tasks):
            if t.train.inputs.shape[1] != d or t.test.inputs.shape[1] != d:
                raise ValueError(f"task {i + 1} input dim differs from task 1 ({d})")
        return self


def _read_be32(f, path, what):
    offset = f.tell()
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated reading {what} at byte {offset}")
    return struct.unpack(">I", raw)[0]


def _read_bytes(f, count, path, what):
    offset = f.tell()
    raw = f.read(count)
    if len(raw) != count:
        raise IdxFormatError(
            f"{path}: truncated reading {what} at byte {offset + len(raw)} "
            f"(wanted {count} bytes, got {len(raw)})")
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a flat [0,1]-scaled Dataset."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic 0x{magic:08x} "
                f"(expected 0x{IMAGE_MAGIC:08x})")
        count = _read_be32(f, images_path, "image count")
        rows = _read_be32(f, images_path, "row count")
        cols = _read_be32(f, images_path, "column count")
        raw = _read_bytes(f, count * rows * cols, images_path, "pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{magic:08x} "
                f"(expected 0x{LABEL_MAGIC:08x})")
        label_count = _read_be32(f, labels_path, "label count")
        raw = _read_bytes(f, label_count, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise IdxFormatError(
            f"{images_path} has {count} images but {labels_path} has "
            f"{label_count} labels")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(inputs=pixels.astype(np.float64) / 255.0, labels=labels,
                   n_classes=max(n_classes, 2))


def write_idx(dataset: Dataset, images_path, labels_path, rows: int, cols: int):
    """Write a Dataset back to an IDX pair (inverse of load_idx for k/255 pixels)."""
    n, d = dataset.inputs.shape
    if rows * cols != d:
        raise ValueError(f"rows*cols = {rows * cols} != input dim {d}")
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def make_permuted_tasks(base, n_tasks: int, seed: int) -> TaskStream:
    """Fixed-pixel-permutation tasks over one base (train, test) pair.

    Task 1 keeps the identity permutation; every later task applies its own
    random pixel shuffle to both splits.  Labels are untouched and a single
    shared head serves all tasks.
    """
    train, test = base
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    d = train.inputs.shape[1]
    rng = SeededRng(seed)
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(d) if t == 0 else rng.permutation(d)
        tasks.append(Task(
            train=Dataset(train.inputs[:, perm], train.labels, train.n_classes),
            test=Dataset(test.inputs[:, perm], test.labels, test.n_classes),
            head=0,
        ))
    return TaskStream(tasks=tasks, single_head=True).validate()


def make_split_tasks(base, pairs) -> TaskStream:
    """Binary tasks from disjoint class pairs, relabeled {0, 1}, one head each."""
    train, test = base
    seen = set()
    for a, b in pairs:
        for c in (a, b):
            if not 0 <= c < train.n_classes:
                raise ValueError(f"class {c} out of range")
            if c in seen:
                raise ValueError(f"class {c} appears in more than one pair")
            seen.add(c)

    def subset(ds: Dataset, a, b) -> Dataset:
        mask = (ds.labels == a) | (ds.labels == b)
        labels = (ds.labels[mask] == b).astype(np.int64)
        return Dataset(ds.inputs[mask], labels, 2)

    tasks = [Task(train=subset(train, a, b), test=subset(test, a, b), head=i)
             for i, (a, b) in enumerate(pairs)]
    return TaskStream(tasks=tasks, single_head=False).validate()


def make_synthetic_tasks(n_tasks: int, n_per_class: int, input_dim: int,
                         class_separation: float, seed: int) -> TaskStream:
    """Two Gaussian blobs per task along a task-specific random direction.

    Blob centers sit at +-(separation/2) on a random unit vector with unit
    isotropic noise; inputs are affinely rescaled into [0, 1] (clipping the
    rare 4-sigma stragglers) and split 80/20 into train/test.
    """
    if n_tasks < 1 or n_per_class < 1 or input_dim < 1:
        raise ValueError("counts must be >= 1")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    rng = SeededRng(seed)
    half = class_separation / 2.0
    lo, hi = -(half + 4.0), (half + 4.0)
    tasks = []
    for t in range(n_tasks):
        u = rng.standard_normal(input_dim)
        u /= np.linalg.norm(u)
        points, labels = [], []
        for cls, sign in ((0, -1.0), (1, 1.0)):
            pts = sign * half * u + rng.standard_normal((n_per_class, input_dim))
            points.append(pts)
            labels.append(np.full(n_per_class, cls, dtype=np.int64))
        x = np.clip((np.vstack(points) - lo) / (hi - lo), 0.0, 1.0)
        y = np.concatenate(labels)
        order = rng.permutation(len(y))
        x, y = x[order], y[order]
        n_train = int(0.8 * len(y))
        tasks.append(Task(
            train=Dataset(x[:n_train], y[:n_train], 2),
            test=Dataset(x[n_train:], y[n_train:], 2),
            head=t,
        ))
    return TaskStream(tasks=tasks, single_head=False).validate()
