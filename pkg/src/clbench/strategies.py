"""Continual-learning strategies behind one interface.

Each strategy is consolidated once at the end of a task and then shapes
training on later tasks, either by adding ``lam * penalty`` to the loss
(EWC, EWC-KFAC), by projecting the gradient (OGD) or by mixing stored
samples into the batches (rehearsal).

Dataset labels are always indices into the rows of the head they are
trained with: global labels for the single growing head, local labels for
per-task heads.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .data import Batch
from .linalg import DimensionError, gram_schmidt_extend, kron_quad_form

KINDS = ("finetune", "ewc", "ewc-kfac", "ogd", "rehearsal")
DEFAULT_LAMBDA = {"finetune": 0.0, "ewc": 1000.0, "ewc-kfac": 10.0, "ogd": 0.0, "rehearsal": 0.0}
CONSOLIDATION_CHUNK = 1000


class ConsolidationError(ValueError):
    pass


def normalize_kind(kind: str) -> str:
    k = kind.lower().replace("_", "-")
    k = {"fine-tune": "finetune", "ewckfac": "ewc-kfac", "kfac": "ewc-kfac"}.get(k, k)
    if k not in KINDS:
        raise ValueError(f"unknown strategy {kind!r}; expected one of {', '.join(KINDS)}")
    return k


@dataclass
class StrategyConfig:
    kind: str = "finetune"
    lam: Optional[float] = None
    ogd_memory_per_task: int = 100
    ogd_basis_cap: int = 300
    buffer_per_class: int = 100

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if self.lam is None:
            self.lam = DEFAULT_LAMBDA[self.kind]
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if min(self.ogd_memory_per_task, self.ogd_basis_cap, self.buffer_per_class) < 0:
            raise ValueError("counts must be >= 0")


def _check_data(data) -> None:
    if data is None or len(data.labels) == 0:
        raise ConsolidationError("cannot consolidate on an empty task")


def _chunks(data):
    n = len(data.labels)
    for s in range(0, n, CONSOLIDATION_CHUNK):
        yield data.images[s:s + CONSOLIDATION_CHUNK], data.labels[s:s + CONSOLIDATION_CHUNK]


def per_sample_loss_pass(model: nn.MlpModel, x, y, head_index: int):
    """Forward pass plus per-sample (unaveraged) loss deltas for a chunk."""
    logits, cache = nn.forward(model, x, head_index)
    d = nn.softmax(np.atleast_2d(logits))
    d[np.arange(d.shape[0]), y] -= 1.0
    grads = nn.backward(model, cache, d, head_index)
    return cache, grads.deltas


class Strategy:
    """Fine-tuning: no memory at all. Base class for the others."""

    def __init__(self, config: StrategyConfig):
        self.config = config

    @property
    def lam(self) -> float:
        return float(self.config.lam)

    def consolidate(self, model: nn.MlpModel, data, head_index: int = 0,
                    task_label: int = 0, rng: Optional[np.random.Generator] = None) -> None:
        _check_data(data)

    def penalty_value(self, model: nn.MlpModel) -> float:
        return 0.0

    def regularize_gradient(self, model: nn.MlpModel, grads: nn.Gradients,
                            lam: Optional[float] = None) -> nn.Gradients:
        return grads

    def compose_batch(self, batch: Batch, rng: np.random.Generator) -> Batch:
        return batch

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], meta: dict) -> None:
        pass

    def state_meta(self) -> dict:
        return {}


FineTune = Strategy


@dataclass
class EwcAnchor:
    theta_star: List[np.ndarray]  # trunk layers then the head rows
    fisher_diag: List[np.ndarray]
    head_index: int
    head_rows: int


def _anchored_params(model: nn.MlpModel, head_index: int, head_rows: int) -> List[np.ndarray]:
    return list(model.layers) + [model.heads[head_index].weight[:head_rows]]


def _add_head_term(out: nn.Gradients, model: nn.MlpModel, head_index: int,
                   rows: int, term: np.ndarray) -> None:
    if head_index not in out.heads:
        if not np.any(term):
            return
        out.heads[head_index] = np.zeros_like(model.heads[head_index].weight)
    out.heads[head_index][:rows] += term


class Ewc(Strategy):
    """Diagonal empirical-Fisher penalty, one anchor per consolidated task."""

    def __init__(self, config: StrategyConfig):
        super().__init__(config)
        self.anchors: List[EwcAnchor] = []

    def fisher_diag(self, model: nn.MlpModel, data, head_index: int) -> List[np.ndarray]:
        """Mean of squared per-sample loss gradients for every anchored parameter.

        The per-sample weight gradient of a layer is ``outer(delta, a)``, so
        its elementwise square sums to ``(delta**2).T @ (a**2)``.
        """
        _check_data(data)
        rows = model.heads[head_index].n_classes
        acc = [np.zeros_like(p) for p in _anchored_params(model, head_index, rows)]
        for x, y in _chunks(data):
            cache, deltas = per_sample_loss_pass(model, x, y, head_index)
            for l, (a, d) in enumerate(zip(cache.inputs, deltas)):
                acc[l] += (d ** 2).T @ (a ** 2)
        n = len(data.labels)
        return [f / n for f in acc]

    def consolidate(self, model, data, head_index=0, task_label=0, rng=None):
        fisher = self.fisher_diag(model, data, head_index)
        rows = model.heads[head_index].n_classes
        theta = [p.copy() for p in _anchored_params(model, head_index, rows)]
        self.anchors.append(EwcAnchor(theta, fisher, head_index, rows))

    def penalty_value(self, model):
        total = 0.0
        for anc in self.anchors:
            params = _anchored_params(model, anc.head_index, anc.head_rows)
            for p, p0, f in zip(params, anc.theta_star, anc.fisher_diag):
                total += 0.5 * float(np.sum(f * (p - p0) ** 2))
        return total

    def regularize_gradient(self, model, grads, lam=None):
        lam = self.lam if lam is None else lam
        if not self.anchors or lam == 0:
            return grads
        out = grads.copy()
        for anc in self.anchors:
            params = _anchored_params(model, anc.head_index, anc.head_rows)
            for l in range(len(model.layers)):
                out.trunk[l] = out.trunk[l] + lam * anc.fisher_diag[l] * (params[l] - anc.theta_star[l])
            term = lam * anc.fisher_diag[-1] * (params[-1] - anc.theta_star[-1])
            _add_head_term(out, model, anc.head_index, anc.head_rows, term)
        return out

    def state_arrays(self):
        arrays = {}
        for i, anc in enumerate(self.anchors):
            for l, (t, f) in enumerate(zip(anc.theta_star, anc.fisher_diag)):
                arrays[f"a{i}_theta{l}"] = t
                arrays[f"a{i}_fisher{l}"] = f
        return arrays

    def state_meta(self):
        return {"anchors": [[a.head_index, a.head_rows, len(a.theta_star)] for a in self.anchors]}

    def load_state_arrays(self, arrays, meta):
        self.anchors = [
            EwcAnchor([arrays[f"a{i}_theta{l}"] for l in range(n)],
                      [arrays[f"a{i}_fisher{l}"] for l in range(n)], hi, rows)
            for i, (hi, rows, n) in enumerate(meta["anchors"])
        ]


@dataclass
class KfacAnchor:
    w_star: List[np.ndarray]
    a_factor: List[np.ndarray]  # (in+1) x (in+1), layer inputs with the homogeneous 1
    g_factor: List[np.ndarray]  # out x out, pre-activation gradients
    head_index: int
    head_rows: int


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


class EwcKfac(Strategy):
    """Kronecker-factored Fisher penalty ``0.5 * tr(G dW A dW^T)`` per layer."""

    def __init__(self, config: StrategyConfig):
        super().__init__(config)
        self.anchors: List[KfacAnchor] = []

    def factors(self, model: nn.MlpModel, data, head_index: int):
        _check_data(data)
        n_layers = len(model.layers) + 1
        a_acc: List[Optional[np.ndarray]] = [None] * n_layers
        g_acc: List[Optional[np.ndarray]] = [None] * n_layers
        for x, y in _chunks(data):
            cache, deltas = per_sample_loss_pass(model, x, y, head_index)
            for l, (a, d) in enumerate(zip(cache.inputs, deltas)):
                aa, dd = a.T @ a, d.T @ d
                a_acc[l] = aa if a_acc[l] is None else a_acc[l] + aa
                g_acc[l] = dd if g_acc[l] is None else g_acc[l] + dd
        n = len(data.labels)
        return [_sym(a / n) for a in a_acc], [_sym(g / n) for g in g_acc]

    def consolidate(self, model, data, head_index=0, task_label=0, rng=None):
        a_f, g_f = self.factors(model, data, head_index)
        rows = model.heads[head_index].n_classes
        w = [p.copy() for p in _anchored_params(model, head_index, rows)]
        self.anchors.append(KfacAnchor(w, a_f, g_f, head_index, rows))

    def penalty_value(self, model):
        total = 0.0
        for anc in self.anchors:
            params = _anchored_params(model, anc.head_index, anc.head_rows)
            for p, w0, a, g in zip(params, anc.w_star, anc.a_factor, anc.g_factor):
                total += 0.5 * kron_quad_form(g, p - w0, a)
        return total

    def regularize_gradient(self, model, grads, lam=None):
        lam = self.lam if lam is None else lam
        if not self.anchors or lam == 0:
            return grads
        out = grads.copy()
        for anc in self.anchors:
            params = _anchored_params(model, anc.head_index, anc.head_rows)
            terms = [lam * (g @ (p - w0) @ a)
                     for p, w0, a, g in zip(params, anc.w_star, anc.a_factor, anc.g_factor)]
            for l in range(len(model.layers)):
                out.trunk[l] = out.trunk[l] + terms[l]
            _add_head_term(out, model, anc.head_index, anc.head_rows, terms[-1])
        return out

    def state_arrays(self):
        arrays = {}
        for i, anc in enumerate(self.anchors):
            for l in range(len(anc.w_star)):
                arrays[f"a{i}_w{l}"] = anc.w_star[l]
                arrays[f"a{i}_A{l}"] = anc.a_factor[l]
                arrays[f"a{i}_G{l}"] = anc.g_factor[l]
        return arrays

    def state_meta(self):
        return {"anchors": [[a.head_index, a.head_rows, len(a.w_star)] for a in self.anchors]}

    def load_state_arrays(self, arrays, meta):
        self.anchors = [
            KfacAnchor([arrays[f"a{i}_w{l}"] for l in range(n)],
                       [arrays[f"a{i}_A{l}"] for l in range(n)],
                       [arrays[f"a{i}_G{l}"] for l in range(n)], hi, rows)
            for i, (hi, rows, n) in enumerate(meta["anchors"])
        ]


@dataclass
class OgdState:
    basis: np.ndarray  # k x dim, orthonormal rows
    cap: int

    def __len__(self) -> int:
        return self.basis.shape[0]


def shared_layout(model: nn.MlpModel) -> List[Tuple[str, int, Tuple[int, int]]]:
    """Parameter blocks the OGD basis lives on.

    The trunk is always shared; the single growing head is shared too. Per-task
    heads are excluded since a past task's head never moves again.
    """
    blocks = [("trunk", l, w.shape) for l, w in enumerate(model.layers)]
    if not model.multi_head:
        blocks.append(("head", 0, model.heads[0].weight.shape))
    return blocks


def flatten_shared(model: nn.MlpModel, grads: nn.Gradients) -> np.ndarray:
    parts = []
    for kind, idx, shape in shared_layout(model):
        if kind == "trunk":
            parts.append(grads.trunk[idx].ravel())
        else:
            g = grads.heads.get(idx)
            parts.append(np.zeros(int(np.prod(shape))) if g is None else g.ravel())
    return np.concatenate(parts)


def unflatten_shared(model: nn.MlpModel, flat: np.ndarray, grads: nn.Gradients) -> nn.Gradients:
    out = grads.copy()
    pos = 0
    for kind, idx, shape in shared_layout(model):
        size = int(np.prod(shape))
        block = flat[pos:pos + size].reshape(shape)
        if kind == "trunk":
            out.trunk[idx] = block
        elif np.any(block) or idx in out.heads:
            out.heads[idx] = block
        pos += size
    return out


def project_out(basis: np.ndarray, g: np.ndarray) -> np.ndarray:
    if basis.shape[0] == 0:
        return g
    return g - basis.T @ (basis @ g)


def project_is_orthogonal_check(state: OgdState, g: np.ndarray) -> float:
    """Largest ``|<projected g, v_j>|`` over the basis."""
    if len(state) == 0:
        raise ValueError("basis is empty")
    basis = _padded(state.basis, g.shape[0])
    return float(np.max(np.abs(basis @ project_out(basis, g))))


def _padded(basis: np.ndarray, dim: int) -> np.ndarray:
    if basis.shape[1] > dim:
        raise DimensionError(f"basis dimension {basis.shape[1]} exceeds gradient dimension {dim}")
    if basis.shape[1] == dim:
        return basis
    # the single head only grows by appending rows, i.e. at the end of the layout
    return np.hstack([basis, np.zeros((basis.shape[0], dim - basis.shape[1]))])


class Ogd(Strategy):
    """Orthogonal gradient descent over ground-truth-logit gradients."""

    def __init__(self, config: StrategyConfig):
        super().__init__(config)
        self.state = OgdState(np.zeros((0, 0)), config.ogd_basis_cap)

    def logit_gradient(self, model: nn.MlpModel, x, y: int, head_index: int) -> np.ndarray:
        logits, cache = nn.forward(model, x, head_index)
        onehot = np.zeros_like(logits)
        onehot[y] = 1.0
        return flatten_shared(model, nn.backward(model, cache, onehot, head_index))

    def consolidate(self, model, data, head_index=0, task_label=0, rng=None):
        _check_data(data)
        rng = np.random.default_rng(0) if rng is None else rng
        n = len(data.labels)
        k = min(self.config.ogd_memory_per_task, n)
        picks = rng.choice(n, size=k, replace=False)
        dim = sum(int(np.prod(s)) for _, _, s in shared_layout(model))
        vectors = list(_padded(self.state.basis, dim)) if len(self.state) else []
        for i in picks:
            if len(vectors) >= self.state.cap:
                break
            v = gram_schmidt_extend(vectors, self.logit_gradient(model, data.images[i],
                                                                 int(data.labels[i]), head_index))
            if v is not None:
                vectors.append(v)
        self.state.basis = np.array(vectors) if vectors else np.zeros((0, dim))

    def regularize_gradient(self, model, grads, lam=None):
        if len(self.state) == 0:
            return grads
        g = flatten_shared(model, grads)
        return unflatten_shared(model, project_out(_padded(self.state.basis, g.shape[0]), g), grads)

    def state_arrays(self):
        return {"basis": self.state.basis}

    def load_state_arrays(self, arrays, meta):
        self.state = OgdState(arrays["basis"], self.config.ogd_basis_cap)


class ReplayBuffer:
    """Per-class reservoir of raw samples."""

    def __init__(self, per_class: int):
        self.per_class = per_class
        self.items: Dict[Tuple[int, int], List[Tuple[np.ndarray, int, int]]] = {}
        self.seen: Dict[Tuple[int, int], int] = {}

    def insert(self, x: np.ndarray, label: int, task: int, rng: np.random.Generator) -> None:
        key = (task, label)
        slot = self.items.setdefault(key, [])
        self.seen[key] = self.seen.get(key, 0) + 1
        if len(slot) < self.per_class:
            slot.append((x, label, task))
            return
        j = int(rng.integers(self.seen[key]))
        if j < self.per_class:
            slot[j] = (x, label, task)

    def __len__(self) -> int:
        return sum(len(v) for v in self.items.values())

    def counts(self) -> Dict[Tuple[int, int], int]:
        return {k: len(v) for k, v in self.items.items()}

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat = [it for key in sorted(self.items) for it in self.items[key]]
        if not flat:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        return (np.array([f[0] for f in flat]), np.array([f[1] for f in flat], dtype=np.int64),
                np.array([f[2] for f in flat], dtype=np.int64))


class Rehearsal(Strategy):
    def __init__(self, config: StrategyConfig):
        super().__init__(config)
        self.buffer = ReplayBuffer(config.buffer_per_class)
        self._cache = None

    def consolidate(self, model, data, head_index=0, task_label=0, rng=None):
        _check_data(data)
        rng = np.random.default_rng(0) if rng is None else rng
        for x, y in zip(data.images, data.labels):
            self.buffer.insert(x, int(y), task_label, rng)
        self._cache = None

    def compose_batch(self, batch, rng):
        if len(self.buffer) == 0:
            return batch
        if self._cache is None:
            self._cache = self.buffer.arrays()
        bx, by, bt = self._cache
        n = batch.y.shape[0]
        use_buffer = rng.random(n) < 0.5
        picks = rng.integers(by.shape[0], size=n)
        x = np.where(use_buffer[:, None], bx[picks], batch.x)
        y = np.where(use_buffer, by[picks], batch.y)
        t = np.where(use_buffer, bt[picks], batch.task)
        return Batch(x, y, t)

    def state_arrays(self):
        x, y, t = self.buffer.arrays()
        return {"x": x, "y": y, "t": t}

    def state_meta(self):
        return {"seen": [[k[0], k[1], v] for k, v in sorted(self.buffer.seen.items())]}

    def load_state_arrays(self, arrays, meta):
        self.buffer = ReplayBuffer(self.config.buffer_per_class)
        for x, y, t in zip(arrays["x"], arrays["y"], arrays["t"]):
            self.buffer.items.setdefault((int(t), int(y)), []).append((x, int(y), int(t)))
        self.buffer.seen = {(t, y): v for t, y, v in meta.get("seen", [])}
        self._cache = None


_REGISTRY = {"finetune": Strategy, "ewc": Ewc, "ewc-kfac": EwcKfac, "ogd": Ogd,
             "rehearsal": Rehearsal}


def make_strategy(config) -> Strategy:
    if isinstance(config, str):
        config = StrategyConfig(kind=config)
    return _REGISTRY[config.kind](config)


def batch_gradients(model: nn.MlpModel, batch: Batch) -> Tuple[float, nn.Gradients]:
    """Mean loss and gradient over a batch whose samples may target different heads."""
    if not model.multi_head:
        return nn.loss_and_gradients(model, batch.x, batch.y, 0)
    n = batch.y.shape[0]
    total_loss, total = 0.0, None
    for head in np.unique(batch.task):
        m = batch.task == head
        loss, g = nn.loss_and_gradients(model, batch.x[m], batch.y[m], int(head))
        w = m.sum() / n
        total_loss += w * loss
        g = g.scale(w)
        total = g if total is None else total + g
    return total_loss, total


def save_state(strategy: Strategy, path) -> None:
    meta = {"config": asdict(strategy.config), "state": strategy.state_meta()}
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **strategy.state_arrays())


def load_state(path) -> Strategy:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    strategy = make_strategy(StrategyConfig(**meta["config"]))
    strategy.load_state_arrays(arrays, meta["state"])
    return strategy


def head_for_task(model: nn.MlpModel, task_label: int) -> int:
    return task_label if model.multi_head else 0


__all__ = [
    "KINDS", "StrategyConfig", "Strategy", "FineTune", "Ewc", "EwcKfac", "Ogd", "Rehearsal",
    "EwcAnchor", "KfacAnchor", "OgdState", "ReplayBuffer", "make_strategy", "batch_gradients",
    "project_is_orthogonal_check", "project_out", "flatten_shared", "save_state", "load_state",
]
