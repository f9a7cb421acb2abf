"""IDX ingestion, MNIST-Fellowship continuum and synthetic blob scenarios."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence

import numpy as np

SINGLE_HEAD = "single-head"
MULTI_HEAD = "multi-head"
SETTINGS = (SINGLE_HEAD, MULTI_HEAD)

FELLOWSHIP = ("mnist", "fashion", "kmnist")
SPLIT_PREFIX = {"train": "train", "test": "t10k"}
IDX_DTYPE_UBYTE = 0x08


class IdxFormatError(ValueError):
    pass


class IdxTruncationError(IdxFormatError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class IdxArray:
    dims: List[int]
    payload: bytes

    def to_numpy(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(buf: bytes) -> IdxArray:
    """Parse an unsigned-byte IDX buffer (magic ``00 00 08 ndim``, big-endian sizes).

    Trailing bytes beyond the declared payload are ignored.
    """
    if len(buf) < 4:
        raise IdxFormatError("buffer shorter than the 4-byte IDX magic")
    zero0, zero1, dtype, ndim = buf[0], buf[1], buf[2], buf[3]
    if zero0 != 0 or zero1 != 0 or dtype != IDX_DTYPE_UBYTE or ndim == 0:
        raise IdxFormatError(f"bad IDX magic {bytes(buf[:4]).hex()}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxTruncationError("header truncated before all dimension sizes")
    dims = list(struct.unpack(f">{ndim}I", buf[4:header]))
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < size:
        raise IdxTruncationError(
            f"payload has {len(buf) - header} bytes, dims {dims} need {size}"
        )
    return IdxArray(dims, bytes(buf[header:header + size]))


def serialize_idx(arr: IdxArray) -> bytes:
    head = bytes([0, 0, IDX_DTYPE_UBYTE, len(arr.dims)])
    return head + struct.pack(f">{len(arr.dims)}I", *arr.dims) + bytes(arr.payload)


def read_idx_file(path) -> IdxArray:
    """Read a (possibly gzip-wrapped) IDX file."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IdxTruncationError(f"{path}: corrupt gzip stream ({exc})") from exc
    try:
        return parse_idx(raw)
    except IdxFormatError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


@dataclass
class Dataset:
    images: np.ndarray  # n x d, float64 in [0, 1] for image data
    labels: np.ndarray  # n, int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class TaskSpec:
    task_label: int
    dataset_name: str
    class_offset: int
    n_classes: int = 10


@dataclass
class Task:
    spec: TaskSpec
    train: Dataset
    test: Dataset


@dataclass
class Continuum:
    tasks: List[Task]
    setting: str = SINGLE_HEAD
    subsampled: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)

    def global_classes(self, t: int) -> set:
        """Global class ids of task ``t`` (labels plus the task's offset)."""
        task = self.tasks[t]
        offset = self.meta["offsets"][t] if self.setting == MULTI_HEAD else 0
        labels = np.concatenate([task.train.labels, task.test.labels])
        return set((labels + offset).tolist())

    def check_disjoint(self) -> None:
        seen: set = set()
        for t in range(len(self.tasks)):
            cls = self.global_classes(t)
            if cls & seen:
                raise ConsistencyError(f"task {t} reuses classes {sorted(cls & seen)}")
            seen |= cls


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    task: np.ndarray


def balanced_subsample(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced subsample, deterministic in ``rng``.

    Each class gets ``size // n_classes`` items (the remainder goes to the
    first classes); a class with too few items contributes all it has and
    the shortfall is not redistributed.
    """
    classes = np.unique(labels)
    base, extra = divmod(size, len(classes))
    picked = []
    for i, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        k = min(base + (1 if i < extra else 0), idx.size)
        picked.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def load_dataset(images_path, labels_path, subsample: Optional[int] = None,
                 seed: int = 0) -> Dataset:
    images = read_idx_file(images_path)
    labels = read_idx_file(labels_path)
    if len(images.dims) < 2 or len(labels.dims) != 1:
        raise IdxFormatError(
            f"expected image and label files, got dims {images.dims} and {labels.dims}"
        )
    if images.dims[0] != labels.dims[0]:
        raise ConsistencyError(
            f"{images_path} has {images.dims[0]} images, {labels_path} has {labels.dims[0]} labels"
        )
    x = images.to_numpy().reshape(images.dims[0], -1)
    y = labels.to_numpy().astype(np.int64)
    if subsample is not None and subsample < y.size:
        idx = balanced_subsample(y, subsample, np.random.default_rng(seed))
        x, y = x[idx], y[idx]
    return Dataset(x.astype(np.float64) / 255.0, y)


def idx_path(root, name: str, split: str, kind: str) -> Path:
    """Path of an IDX file in ``root/name``; prefers the gzipped variant if present."""
    suffix = "idx3" if kind == "images" else "idx1"
    base = Path(root) / name / f"{SPLIT_PREFIX[split]}-{kind}-{suffix}-ubyte"
    gz = base.with_name(base.name + ".gz")
    if gz.exists() or not base.exists():
        return gz
    return base


def fellowship_files(root) -> List[Path]:
    return [
        idx_path(root, name, split, kind)
        for name in FELLOWSHIP
        for split in ("train", "test")
        for kind in ("images", "labels")
    ]


def build_fellowship(root_dir, setting: str = SINGLE_HEAD, subsample: Optional[int] = 5000,
                     seed: int = 0, test_subsample: Optional[int] = 2000,
                     order: Sequence[str] = FELLOWSHIP) -> Continuum:
    """MNIST -> Fashion-MNIST -> KMNIST, ten classes each.

    Single-head relabels task ``t`` to ``10t..10t+9``; multi-head keeps local
    labels and the task label selects the head.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    for p in fellowship_files(root_dir):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file: {p}")
    tasks = []
    for t, name in enumerate(order):
        offset = 10 * t
        splits = {}
        for split, n in (("train", subsample), ("test", test_subsample)):
            ds = load_dataset(
                idx_path(root_dir, name, split, "images"),
                idx_path(root_dir, name, split, "labels"),
                subsample=n,
                seed=seed + 1000 * t + (0 if split == "train" else 1),
            )
            if setting == SINGLE_HEAD:
                ds.labels = ds.labels + offset
            splits[split] = ds
        spec = TaskSpec(t, name, offset if setting == SINGLE_HEAD else 0, 10)
        tasks.append(Task(spec, splits["train"], splits["test"]))
    cont = Continuum(tasks, setting, subsampled=subsample is not None or test_subsample is not None,
                     meta={"subsample": subsample, "test_subsample": test_subsample,
                           "offsets": [10 * t for t in range(len(order))]})
    cont.check_disjoint()
    return cont


def iterate_batches(data: Dataset, batch_size: int, epoch_seed: int,
                    task_label: int = 0) -> Iterator[Batch]:
    """One epoch of shuffled mini-batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(data))
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(data.images[idx], data.labels[idx], np.full(idx.size, task_label, dtype=np.int64))


def blob_centers(n_classes: int, dim: int, rng: np.random.Generator,
                 angles: Optional[Sequence[float]] = None) -> np.ndarray:
    """Class centers on the unit circle of a random 2-D subspace of R^dim."""
    if angles is None:
        phase = rng.uniform(0.0, 2 * np.pi)
        angles = phase + 2 * np.pi * np.arange(n_classes) / n_classes
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size != n_classes:
        raise ValueError("need one angle per class")
    if dim == 1:
        raise ValueError("blobs need dim >= 2")
    q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return circle @ q.T


def synthetic_blobs(n_tasks: int, classes_per_task: int, dim: int, n_per_class: int,
                    seed: int, setting: str = SINGLE_HEAD, sigma: float = 0.15,
                    angles: Optional[Sequence[float]] = None) -> Continuum:
    """Gaussian blobs, one per class, grouped into tasks of consecutive classes.

    ``angles`` (radians, one per global class) overrides the evenly spaced
    default placement, which is how overlapping layouts are built.
    """
    if min(n_tasks, classes_per_task, dim, n_per_class) < 1:
        raise ValueError("all counts must be >= 1")
    rng = np.random.default_rng(seed)
    k = n_tasks * classes_per_task
    centers = blob_centers(k, dim, rng, angles)
    n_train = int(round(0.8 * n_per_class))
    tasks = []
    for t in range(n_tasks):
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for local in range(classes_per_task):
            c = t * classes_per_task + local
            pts = centers[c] + sigma * rng.standard_normal((n_per_class, dim))
            lab = c if setting == SINGLE_HEAD else local
            tr_x.append(pts[:n_train])
            te_x.append(pts[n_train:])
            tr_y.append(np.full(n_train, lab))
            te_y.append(np.full(n_per_class - n_train, lab))
        offset = t * classes_per_task
        spec = TaskSpec(t, "blobs", offset if setting == SINGLE_HEAD else 0, classes_per_task)
        tasks.append(Task(spec, Dataset(np.vstack(tr_x), np.concatenate(tr_y)),
                          Dataset(np.vstack(te_x), np.concatenate(te_y))))
    cont = Continuum(tasks, setting, meta={"centers": centers,
                                           "offsets": [t * classes_per_task for t in range(n_tasks)]})
    cont.check_disjoint()
    return cont


def default_data_root() -> Path:
    return Path(os.environ.get("CLBENCH_DATA", "data"))
