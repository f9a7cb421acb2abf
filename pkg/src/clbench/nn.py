"""Multilayer perceptron with hand-written forward/backward passes.

The model is a ReLU trunk (the feature extractor) followed by one or more
linear heads. Every weight matrix carries its bias as a trailing column, so
a layer computes ``W @ [a; 1]``. All routines accept a single sample (1-D
input) or a batch (2-D, one sample per row).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .linalg import DimensionError

ACTIVATIONS = ("relu", "linear")


class UsageError(RuntimeError):
    """Raised when an operation does not fit the model's head mode."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class MlpConfig:
    input_dim: int
    hidden_sizes: Tuple[int, ...]
    init_seed: int = 0
    activation: str = "relu"
    latent_dim: Optional[int] = None

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if not self.hidden_sizes or min(self.hidden_sizes) <= 0:
            raise ValueError("hidden_sizes must be a nonempty list of positive sizes")
        if self.latent_dim is None:
            self.latent_dim = self.hidden_sizes[-1]
        elif self.latent_dim != self.hidden_sizes[-1]:
            raise ValueError("latent_dim must equal the last hidden size")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")


@dataclass
class Head:
    weight: np.ndarray  # n_classes x (latent_dim + 1)
    class_offset: int = 0

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]  # input of each trunk layer and of the head, ones appended
    preacts: List[np.ndarray]
    latent: np.ndarray
    single: bool


@dataclass
class Gradients:
    trunk: List[np.ndarray]
    heads: Dict[int, np.ndarray]
    deltas: List[np.ndarray] = field(default_factory=list)

    def copy(self) -> "Gradients":
        return Gradients(
            [g.copy() for g in self.trunk],
            {k: g.copy() for k, g in self.heads.items()},
            [d.copy() for d in self.deltas],
        )

    def scale(self, c: float) -> "Gradients":
        return Gradients(
            [c * g for g in self.trunk], {k: c * g for k, g in self.heads.items()}
        )

    def __add__(self, other: "Gradients") -> "Gradients":
        heads = {k: g.copy() for k, g in self.heads.items()}
        for k, g in other.heads.items():
            heads[k] = heads[k] + g if k in heads else g.copy()
        return Gradients([a + b for a, b in zip(self.trunk, other.trunk)], heads)


class MlpModel:
    """Trunk layers plus a list of heads.

    In single-head mode there is exactly one head that grows as new classes
    arrive (:func:`expand_head`); in multi-head mode each task gets its own
    head (:func:`add_head`).
    """

    def __init__(self, config: MlpConfig, layers: List[np.ndarray], heads: List[Head],
                 multi_head: bool = False):
        self.config = config
        self.layers = layers
        self.heads = heads
        self.multi_head = multi_head

    @property
    def n_classes(self) -> int:
        return sum(h.n_classes for h in self.heads)

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.config,
            [w.copy() for w in self.layers],
            [Head(h.weight.copy(), h.class_offset) for h in self.heads],
            self.multi_head,
        )


def _he_layer(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float) -> np.ndarray:
    w = np.zeros((fan_out, fan_in + 1))
    w[:, :fan_in] = rng.standard_normal((fan_out, fan_in)) * scale
    return w


def init(config: MlpConfig, n_initial_classes: int, multi_head: bool = False) -> MlpModel:
    """He-initialized trunk with zero biases and one head of ``n_initial_classes`` rows."""
    rng = np.random.default_rng(config.init_seed)
    dims = (config.input_dim,) + config.hidden_sizes
    layers = [
        _he_layer(rng, fan_in, fan_out, np.sqrt(2.0 / fan_in))
        for fan_in, fan_out in zip(dims[:-1], dims[1:])
    ]
    h = config.latent_dim
    head = Head(_he_layer(rng, h, n_initial_classes, np.sqrt(1.0 / h)), 0)
    return MlpModel(config, layers, [head], multi_head)


def _append_ones(a: np.ndarray) -> np.ndarray:
    return np.hstack([a, np.ones((a.shape[0], 1))])


def _trunk(model: MlpModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.ndim != 2 or a.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"input has shape {x.shape}, model expects {model.config.input_dim} features"
        )
    relu = model.config.activation == "relu"
    inputs, preacts = [], []
    for w in model.layers:
        a1 = _append_ones(a)
        z = a1 @ w.T
        inputs.append(a1)
        preacts.append(z)
        a = np.maximum(z, 0.0) if relu else z
    return a, inputs, preacts, single


def _check_head(model: MlpModel, head_index: int) -> Head:
    if not 0 <= head_index < len(model.heads):
        raise DimensionError(f"head index {head_index} out of range ({len(model.heads)} heads)")
    return model.heads[head_index]


def forward(model: MlpModel, x, head_index: int = 0) -> Tuple[np.ndarray, ForwardCache]:
    head = _check_head(model, head_index)
    latent_, inputs, preacts, single = _trunk(model, x)
    h1 = _append_ones(latent_)
    logits = h1 @ head.weight.T
    cache = ForwardCache(inputs + [h1], preacts, latent_, single)
    return (logits[0] if single else logits), cache


def latent(model: MlpModel, x) -> np.ndarray:
    """Feature-extractor output (the input of the last layer)."""
    a, _, _, single = _trunk(model, x)
    return a[0] if single else a


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_ce(logits, target) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    For a batch the loss is the mean over rows, and ``dlogits`` is the
    gradient of that mean (rows scaled by ``1/n``).
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = z.shape[0]
    if t.shape[0] != n or t.min() < 0 or t.max() >= z.shape[1]:
        raise DimensionError("targets do not index the logits")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - shifted[rows, t]))
    d = softmax(z)
    d[rows, t] -= 1.0
    d /= n
    return loss, (d[0] if single else d)


def backward(model: MlpModel, cache: ForwardCache, dlogits, head_index: int = 0) -> Gradients:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. trunk and the active head.

    ``deltas[l]`` holds the per-sample gradient w.r.t. the pre-activations of
    trunk layer ``l``; the last entry is ``dlogits`` itself (the head's).
    """
    head = _check_head(model, head_index)
    d = np.asarray(dlogits, dtype=np.float64)
    d = d[None, :] if d.ndim == 1 else d
    if d.shape != (cache.inputs[-1].shape[0], head.n_classes):
        raise DimensionError(f"dlogits has shape {d.shape}, head has {head.n_classes} classes")
    relu = model.config.activation == "relu"
    head_grad = d.T @ cache.inputs[-1]
    deltas = [d]
    trunk_grads: List[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    w_next = head.weight
    for l in range(len(model.layers) - 1, -1, -1):
        da = d @ w_next[:, :-1]
        d = da * (cache.preacts[l] > 0) if relu else da
        trunk_grads[l] = d.T @ cache.inputs[l]
        deltas.insert(0, d)
        w_next = model.layers[l]
    return Gradients(trunk_grads, {head_index: head_grad}, deltas)


def loss_and_gradients(model: MlpModel, x, targets, head_index: int = 0):
    """Mean cross-entropy over a batch and its gradients."""
    logits, cache = forward(model, x, head_index)
    loss, dlogits = loss_ce(logits, targets)
    return loss, backward(model, cache, dlogits, head_index)


def sgd_step(model: MlpModel, grads: Gradients, lr: float) -> None:
    if len(grads.trunk) != len(model.layers):
        raise DimensionError("gradient does not match the trunk depth")
    for w, g in zip(model.layers, grads.trunk):
        if g.shape != w.shape:
            raise DimensionError(f"gradient shape {g.shape} != weight shape {w.shape}")
        w -= lr * g
    for k, g in grads.heads.items():
        w = model.heads[k].weight
        if g.shape != w.shape:
            raise DimensionError(f"head gradient shape {g.shape} != {w.shape}")
        w -= lr * g


def expand_head(model: MlpModel, n_new_classes: int, seed: int) -> None:
    """Append ``n_new_classes`` freshly initialized rows to the single head."""
    if model.multi_head:
        raise UsageError("expand_head is only valid in single-head mode")
    if n_new_classes == 0:
        return
    h = model.config.latent_dim
    rng = np.random.default_rng(seed)
    rows = _he_layer(rng, h, n_new_classes, np.sqrt(1.0 / h))
    head = model.heads[0]
    head.weight = np.vstack([head.weight, rows])


def add_head(model: MlpModel, n_classes: int, class_offset: int, seed: int) -> int:
    """Append an independent head for a new task; returns its index."""
    if not model.multi_head:
        raise UsageError("add_head is only valid in multi-head mode")
    h = model.config.latent_dim
    rng = np.random.default_rng(seed)
    model.heads.append(Head(_he_layer(rng, h, n_classes, np.sqrt(1.0 / h)), class_offset))
    return len(model.heads) - 1


def save_checkpoint(model: MlpModel, path) -> None:
    arrays = {f"layer{i}": w for i, w in enumerate(model.layers)}
    for i, h in enumerate(model.heads):
        arrays[f"head{i}"] = h.weight
    meta = {
        "config": asdict(model.config),
        "multi_head": model.multi_head,
        "offsets": [h.class_offset for h in model.heads],
    }
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, expected: Optional[MlpConfig] = None) -> MlpModel:
    """Load a model written by :func:`save_checkpoint`.

    When ``expected`` is given, architecture fields must match it.
    """
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        cfg = MlpConfig(**meta["config"])
        if expected is not None:
            fields = ("input_dim", "hidden_sizes", "activation")
            for name in fields:
                if getattr(cfg, name) != getattr(expected, name):
                    raise CheckpointError(
                        f"checkpoint {name}={getattr(cfg, name)!r} does not match "
                        f"configured {getattr(expected, name)!r}"
                    )
        layers = [z[f"layer{i}"].copy() for i in range(len(cfg.hidden_sizes))]
        heads = [Head(z[f"head{i}"].copy(), off) for i, off in enumerate(meta["offsets"])]
    return MlpModel(cfg, layers, heads, bool(meta["multi_head"]))


def parameter_count(model: MlpModel) -> int:
    return sum(w.size for w in model.layers) + sum(h.weight.size for h in model.heads)


def all_parameters(model: MlpModel) -> Sequence[np.ndarray]:
    return list(model.layers) + [h.weight for h in model.heads]
