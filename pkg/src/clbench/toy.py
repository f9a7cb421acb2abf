"""Small, fully inspectable instances of the single-head failure.

``minimal_example`` replays a four-point, two-task problem with integer
arithmetic. ``check_intertask_inequality`` lists every old point that a
newly added output column out-scores. ``separator_demo`` trains one linear
separator per task on 2-D blobs, freezes the first while learning the
second, and compares task-gated against single-head predictions.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Continuum, synthetic_blobs
from .linalg import DimensionError, dot

MINIMAL_POINTS = ([-1, 1], [1, 1], [0, -2], [-3, -2])
MINIMAL_LABELS = (0, 1, 2, 3)
MINIMAL_COLUMNS = ([-1, 0], [1, 0], [1, 2], [-1, 3])

# task 0 pair top/bottom; task 1 pair left/right: the tasks stay apart
SEPARATED_ANGLES = np.deg2rad([90.0, 270.0, 0.0, 180.0])
# task 1 pair rotated close to task 0's: class 0 lands on the class-3 (positive) side
OVERLAP_ANGLES = np.deg2rad([90.0, 270.0, 255.0, 75.0])


@dataclass
class LinearSeparator:
    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not np.any(self.weight):
            raise ValueError("separator weight must not be all zero")

    def margin(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.weight + self.bias


@dataclass
class Violation:
    point: int
    column: int
    lhs: float  # score of the point's own class
    rhs: float  # score of the new column


@dataclass
class MinimalExampleReport:
    products: np.ndarray  # products[i, j] = <X_i, A_j>
    predictions: List[int]
    violations: List[Violation]

    def product(self, i: int, j: int) -> int:
        return int(self.products[i, j])

    def lines(self) -> List[str]:
        out = []
        for i in range(self.products.shape[0]):
            row = "  ".join(f"<X{i},A{j}>={self.product(i, j):>3d}"
                            for j in range(self.products.shape[1]))
            out.append(f"{row}   argmax={self.predictions[i]} (label {MINIMAL_LABELS[i]})")
        for v in self.violations:
            out.append(f"violation: <X{v.point},A{MINIMAL_LABELS[v.point]}>={v.lhs:g}"
                       f" <= <X{v.point},A{v.column}>={v.rhs:g}")
        return out


def minimal_example() -> MinimalExampleReport:
    points = np.array(MINIMAL_POINTS, dtype=np.int64)
    columns = np.array(MINIMAL_COLUMNS, dtype=np.int64)
    products = points @ columns.T  # exact integer arithmetic
    preds = [int(np.argmax(row)) for row in products]
    viol = check_intertask_inequality(
        [(points[i], MINIMAL_LABELS[i]) for i in (0, 1)],
        new_columns=[columns[2], columns[3]],
        old_columns=[columns[0], columns[1]],
        new_offset=2,
    )
    return MinimalExampleReport(products, preds, viol)


def check_intertask_inequality(old_points: Sequence[Tuple[Sequence[float], int]],
                               new_columns: Sequence[Sequence[float]],
                               old_columns: Sequence[Sequence[float]],
                               new_offset: Optional[int] = None) -> List[Violation]:
    """Pairs (old point, new column) where the new column scores at least as high.

    ``old_points`` are ``(x, label)`` with labels indexing ``old_columns``.
    Reported column indices are ``new_offset + j`` (default: right after the
    old columns).
    """
    offset = len(old_columns) if new_offset is None else new_offset
    dims = {len(c) for c in list(new_columns) + list(old_columns)}
    dims |= {len(x) for x, _ in old_points}
    if len(dims) > 1:
        raise DimensionError(f"mixed vector dimensions {sorted(dims)}")
    out = []
    for i, (x, y) in enumerate(old_points):
        own = dot(x, old_columns[y])
        for j, col in enumerate(new_columns):
            other = dot(x, col)
            if own <= other:
                out.append(Violation(i, offset + j, own, other))
    return out


def train_logistic(x: np.ndarray, y: np.ndarray, steps: int = 500, lr: float = 0.1) -> LinearSeparator:
    """Binary logistic regression by full-batch gradient descent from zero."""
    w = np.zeros(x.shape[1])
    b = 0.0
    t = y.astype(np.float64)
    n = x.shape[0]
    for _ in range(steps):
        z = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free sigmoid
        r = p - t
        w -= lr * (x.T @ r) / n
        b -= lr * float(r.sum()) / n
    return LinearSeparator(w, b)


def separator_scores(separators: Sequence[LinearSeparator], x: np.ndarray) -> np.ndarray:
    """Per-class scores: each separator becomes columns ``(-m/2, +m/2)``."""
    cols = []
    for s in separators:
        m = s.margin(x)
        cols += [-0.5 * m, 0.5 * m]
    return np.stack(cols, axis=1)


@dataclass
class DemoReport:
    separators: List[LinearSeparator]
    intra_task_acc: List[float]
    multi_head_acc: float
    single_head_acc: float
    inter_task_confusion: float  # share of single-head errors that land in the other task
    frozen_unchanged: bool
    continuum: Continuum = field(repr=False)
    angles: np.ndarray = field(repr=False, default=None)

    def lines(self) -> List[str]:
        out = [f"task {t}: separator w=({s.weight[0]:+.3f},{s.weight[1]:+.3f}) b={s.bias:+.3f}"
               f"  intra-task acc={a:.3f}"
               for t, (s, a) in enumerate(zip(self.separators, self.intra_task_acc))]
        out.append(f"multi-head (task label given) acc={self.multi_head_acc:.3f}")
        out.append(f"single-head 4-way acc={self.single_head_acc:.3f}"
                   f"  inter-task share of errors={self.inter_task_confusion:.3f}")
        out.append(f"first separator unchanged while learning the second: {self.frozen_unchanged}")
        return out


def separator_demo(seed: int = 0, overlap: bool = False, n_per_class: int = 200,
                   angles: Optional[Sequence[float]] = None, steps: int = 500,
                   lr: float = 0.1) -> DemoReport:
    if angles is None:
        angles = OVERLAP_ANGLES if overlap else SEPARATED_ANGLES
    cont = synthetic_blobs(2, 2, 2, n_per_class, seed, angles=angles)
    separators: List[LinearSeparator] = []
    frozen_snapshot = None
    for t, task in enumerate(cont.tasks):
        local = task.train.labels - task.spec.class_offset
        separators.append(train_logistic(task.train.images, local, steps, lr))
        if t == 0:
            frozen_snapshot = (separators[0].weight.copy(), separators[0].bias)
    frozen_ok = (np.array_equal(frozen_snapshot[0], separators[0].weight)
                 and frozen_snapshot[1] == separators[0].bias)

    intra, correct_mh, correct_sh, cross, total = [], 0, 0, 0, 0
    for t, task in enumerate(cont.tasks):
        x, y = task.test.images, task.test.labels
        local = y - task.spec.class_offset
        gated = (separators[t].margin(x) > 0).astype(int)
        acc = float(np.mean(gated == local))
        intra.append(acc)
        correct_mh += int(np.sum(gated == local))
        pred = np.argmax(separator_scores(separators, x), axis=1)
        correct_sh += int(np.sum(pred == y))
        wrong = pred != y
        cross += int(np.sum(wrong & (pred // 2 != t)))
        total += y.size
    errors = total - correct_sh
    return DemoReport(separators, intra, correct_mh / total, correct_sh / total,
                      cross / errors if errors else 0.0, frozen_ok, cont, np.asarray(angles))


def write_demo_csv(report: DemoReport, points_path, planes_path) -> None:
    points_path, planes_path = Path(points_path), Path(planes_path)
    with open(points_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "class", "task"])
        for t, task in enumerate(report.continuum.tasks):
            for split in (task.train, task.test):
                for (px, py), c in zip(split.images, split.labels):
                    w.writerow([f"{px:.6g}", f"{py:.6g}", int(c), t])
    with open(planes_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["w1", "w2", "b", "task"])
        for t, s in enumerate(report.separators):
            w.writerow([f"{s.weight[0]:.6g}", f"{s.weight[1]:.6g}", f"{s.bias:.6g}", t])


def summary(seed: int = 0) -> Dict[str, DemoReport]:
    return {"separated": separator_demo(seed), "overlap": separator_demo(seed, overlap=True)}
