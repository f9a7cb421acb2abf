"""Evaluation protocol, latent sampling, exact t-SNE and CSV output."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from .data import MULTI_HEAD, SINGLE_HEAD, Continuum

METRIC_COLUMNS = ["step", "tasks_trained", "strategy", "setting", "seed", "acc_global",
                  "acc_task0", "acc_task1", "acc_task2", "penalty"]
EMBEDDING_COLUMNS = ["x", "y", "task_label", "class_label"]


class NumericError(ArithmeticError):
    pass


@dataclass
class MetricsRow:
    global_step: int
    tasks_trained: int
    test_acc_global: float
    test_acc_per_task: List[float]
    penalty: float = 0.0
    strategy: str = ""
    setting: str = SINGLE_HEAD
    seed: int = 0
    task_sizes: List[int] = field(default_factory=list, repr=False)


@dataclass
class EmbeddingDump:
    coords: np.ndarray  # n x 2
    task_labels: np.ndarray
    class_labels: np.ndarray


def _predict_single_head(model: nn.MlpModel, x: np.ndarray) -> np.ndarray:
    # no task label reaches this path: argmax over every class seen so far
    logits, _ = nn.forward(model, x, 0)
    return np.argmax(np.atleast_2d(logits), axis=1)


def _predict_multi_head(model: nn.MlpModel, x: np.ndarray, task_label: int) -> np.ndarray:
    logits, _ = nn.forward(model, x, task_label)
    return np.argmax(np.atleast_2d(logits), axis=1)


def evaluate(model: nn.MlpModel, continuum: Continuum, setting: Optional[str] = None,
             **info) -> MetricsRow:
    """Accuracy on every task's test set and on their concatenation.

    Tasks the model has no head (or no classes) for yet score 0.
    ``info`` fills the bookkeeping fields of the returned row.
    """
    setting = continuum.setting if setting is None else setting
    if (setting == MULTI_HEAD) != model.multi_head:
        raise nn.UsageError(f"{setting} evaluation on a "
                            f"{'multi' if model.multi_head else 'single'}-head model")
    correct, sizes = [], []
    for t, task in enumerate(continuum.tasks):
        x, y = task.test.images, task.test.labels
        if setting == SINGLE_HEAD:
            pred = _predict_single_head(model, x)
        elif t < len(model.heads):
            pred = _predict_multi_head(model, x, t)
        else:
            pred = np.full(y.shape, -1)
        correct.append(int(np.sum(pred == y)))
        sizes.append(int(y.size))
    per_task = [c / s if s else 0.0 for c, s in zip(correct, sizes)]
    return MetricsRow(
        global_step=info.get("global_step", 0),
        tasks_trained=info.get("tasks_trained", 0),
        test_acc_global=sum(correct) / max(sum(sizes), 1),
        test_acc_per_task=per_task,
        penalty=info.get("penalty", 0.0),
        strategy=info.get("strategy", ""),
        setting=setting,
        seed=info.get("seed", 0),
        task_sizes=sizes,
    )


def concatenated_test(continuum: Continuum):
    """Stacked test sets with task labels and global class labels."""
    xs, tasks, classes = [], [], []
    for t, task in enumerate(continuum.tasks):
        offset = continuum.meta["offsets"][t] if continuum.setting == MULTI_HEAD else 0
        xs.append(task.test.images)
        tasks.append(np.full(len(task.test), t))
        classes.append(task.test.labels + offset)
    return np.vstack(xs), np.concatenate(tasks), np.concatenate(classes)


def sample_latents(model: nn.MlpModel, continuum: Continuum, n: int = 200, seed: int = 0):
    x, tasks, classes = concatenated_test(continuum)
    if n > x.shape[0]:
        raise nn.UsageError(f"asked for {n} points, test sets hold {x.shape[0]}")
    idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=n, replace=False))
    return nn.latent(model, x[idx]), tasks[idx], classes[idx]


# --- t-SNE -----------------------------------------------------------------

DIST_FLOOR = 1e-12


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _row_entropy(d: np.ndarray, beta: np.ndarray):
    """Conditional distributions ``p_j|i`` and their entropies (nats).

    ``d`` holds each row's distances to the other points (diagonal removed).
    """
    shifted = d - d.min(axis=1, keepdims=True)
    w = np.exp(-beta[:, None] * shifted)
    z = w.sum(axis=1)
    p = w / z[:, None]
    h = np.log(z) + beta * np.sum(p * shifted, axis=1)
    return p, h


def conditional_probabilities(dists: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_steps: int = 50):
    """Per-row Gaussian precisions found by bisection on the row entropy.

    The search runs in log-precision over a bracket scaled to each row's
    mean distance and stops once every row is within ``tol / 100`` of
    ``ln(perplexity)``. Returns ``(P_cond, betas, entropies)``.
    """
    n = dists.shape[0]
    off = ~np.eye(n, dtype=bool)
    d = np.maximum(dists[off].reshape(n, n - 1), DIST_FLOOR)
    target = np.log(perplexity)
    scale = d.mean(axis=1)
    lo = np.full(n, -30.0)
    hi = np.full(n, 30.0)
    mid = np.zeros(n)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        _, h = _row_entropy(d, np.exp(mid) / scale)
        too_flat = h > target  # entropy too high: sharpen
        lo = np.where(too_flat, mid, lo)
        hi = np.where(too_flat, hi, mid)
        if np.all(np.abs(h - target) < tol / 100):
            break
    beta = np.exp(mid) / scale
    p_rows, h = _row_entropy(d, beta)
    p = np.zeros((n, n))
    p[off] = p_rows.ravel()
    return p, beta, h


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    p_cond, _, _ = conditional_probabilities(pairwise_sq_dists(x), perplexity)
    p = p_cond + p_cond.T
    return p / p.sum()


def student_t_affinities(y: np.ndarray):
    num = 1.0 / (1.0 + pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    q, _ = student_t_affinities(y)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


@dataclass
class TsneResult:
    coords: np.ndarray
    p: np.ndarray
    kl_initial: float
    kl_final: float
    entropies: np.ndarray


def tsne(latents, perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
         learning_rate: float = 200.0, early_exaggeration: float = 4.0,
         exaggeration_iters: int = 100, momentum_switch: int = 250,
         return_info: bool = False):
    """Exact t-SNE to two dimensions.

    Gradient descent with momentum 0.5 (0.8 after ``momentum_switch``) and
    per-coordinate adaptive gains; P is exaggerated for the first
    ``exaggeration_iters`` iterations.
    """
    x = np.asarray(latents, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("t-SNE input contains non-finite values")
    n = x.shape[0]
    if n < 3 * perplexity:
        raise ValueError(f"need at least {3 * perplexity:g} points for perplexity {perplexity:g}")
    p_cond, _, entropies = conditional_probabilities(pairwise_sq_dists(x), perplexity)
    p = p_cond + p_cond.T
    p /= p.sum()
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    kl0 = kl_divergence(p, y)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iters):
        pe = p * early_exaggeration if it < exaggeration_iters else p
        q, num = student_t_affinities(y)
        w = (pe - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        momentum = 0.5 if it < momentum_switch else 0.8
        gains = np.where(update * grad < 0.0, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
    if not np.all(np.isfinite(y)):
        raise NumericError("t-SNE diverged")
    if not return_info:
        return y
    return TsneResult(y, p, kl0, kl_divergence(p, y), entropies)


# --- CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def metric_columns(rows: Sequence[MetricsRow]) -> List[str]:
    n_tasks = max([3] + [len(r.test_acc_per_task) for r in rows])
    tasks = [f"acc_task{i}" for i in range(n_tasks)]
    return METRIC_COLUMNS[:6] + tasks + ["penalty"]


def metrics_records(rows: Sequence[MetricsRow]) -> List[List[str]]:
    cols = metric_columns(rows)
    n_tasks = len(cols) - 7
    out = []
    for r in rows:
        accs = [(_fmt(r.test_acc_per_task[i]) if i < len(r.test_acc_per_task) else "")
                for i in range(n_tasks)]
        out.append([_fmt(r.global_step), _fmt(r.tasks_trained), r.strategy, r.setting,
                    _fmt(r.seed), _fmt(float(r.test_acc_global))] + accs + [_fmt(float(r.penalty))])
    return out


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(metric_columns(rows))
            w.writerows(metrics_records(rows))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics_csv(path) -> List[MetricsRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        task_cols = [c for c in reader.fieldnames or [] if c.startswith("acc_task")]
        rows = []
        for rec in reader:
            rows.append(MetricsRow(
                global_step=int(rec["step"]), tasks_trained=int(rec["tasks_trained"]),
                test_acc_global=float(rec["acc_global"]),
                test_acc_per_task=[float(rec[c]) for c in task_cols if rec[c] != ""],
                penalty=float(rec["penalty"]), strategy=rec["strategy"],
                setting=rec["setting"], seed=int(rec["seed"])))
    return rows


def write_embedding_csv(dump: EmbeddingDump, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(EMBEDDING_COLUMNS)
            for (x, y), t, c in zip(dump.coords, dump.task_labels, dump.class_labels):
                w.writerow([_fmt(float(x)), _fmt(float(y)), _fmt(int(t)), _fmt(int(c))])
    except OSError as exc:
        raise OSError(f"cannot write embedding to {path}: {exc}") from exc


def read_embedding_csv(path) -> EmbeddingDump:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return EmbeddingDump(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int))
    return EmbeddingDump(data[:, :2], data[:, 2].astype(int), data[:, 3].astype(int))


def centroid_separation(coords: np.ndarray, task_labels: np.ndarray) -> float:
    """Mean pairwise distance between per-task centroids of an embedding."""
    labels = np.unique(task_labels)
    cents = np.array([coords[task_labels == t].mean(axis=0) for t in labels])
    if len(cents) < 2:
        return 0.0
    d = np.sqrt(pairwise_sq_dists(cents))
    return float(d[np.triu_indices(len(cents), 1)].mean())


def scale_free_separation(coords: np.ndarray, task_labels: np.ndarray) -> float:
    """Centroid separation divided by the embedding's RMS spread."""
    spread = float(np.sqrt(np.mean(np.sum((coords - coords.mean(axis=0)) ** 2, axis=1))))
    return centroid_separation(coords, task_labels) / max(spread, 1e-300)
