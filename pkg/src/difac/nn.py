"""Small deterministic numpy GCN engine with hand-written backprop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, SchemaError, TrainingError
from .graph import NormalizedAdjacency


ACTIVATIONS = ("relu", "linear", "tanh")


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = list(self.weights)
        out.extend(b for b in self.biases if b is not None)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights],
                           [None if b is None else b.copy() for b in self.biases])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams([w.astype(dtype) for w in self.weights],
                           [None if b is None else b.astype(dtype) for b in self.biases])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights],
                           [None if b is None else np.zeros_like(b) for b in self.biases])


def init_params(dims: Sequence[int], seed: int = 0, bias: bool = True,
                dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype) if bias else None)
    return ModelParams(weights, biases)


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 200
    weight_decay: float = 5e-4
    hidden: int = 64
    dropout: float = 0.5
    input_dropout: float = 0.0
    seed: int = 0
    activation: str = "relu"
    patience: int | None = 30
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.input_dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ForwardTrace:
    inputs: list  # H^(l-1) as fed to layer l, after dropout
    pre: list[np.ndarray]  # Z^(l) = A (H^(l-1) W_l) + b_l
    acts: list[np.ndarray]  # sigma(Z^(l)) for hidden layers, before dropout
    masks: list[np.ndarray | None]  # inverted-dropout multipliers per layer input
    activation: str = "relu"


def spmm(adj: NormalizedAdjacency | sp.spmatrix, dense: np.ndarray) -> np.ndarray:
    m = adj.matrix if isinstance(adj, NormalizedAdjacency) else adj
    if m.shape[1] != dense.shape[0]:
        raise SchemaError(f"spmm dimension mismatch: {m.shape} x {dense.shape}")
    return np.asarray(m @ dense)


def _matmul(h, w: np.ndarray) -> np.ndarray:
    return np.asarray(h @ w)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1 - a * a
    return np.ones_like(z)


def _dropout(h, rate: float, rng: np.random.Generator):
    """Inverted dropout; sparse inputs only drop stored entries (zeros stay zero)."""
    keep = 1.0 - rate
    if sp.issparse(h):
        mask = (rng.random(h.nnz) < keep).astype(h.dtype) / keep
        out = h.copy()
        out.data = out.data * mask
        return out, mask
    mask = (rng.random(h.shape) < keep).astype(h.dtype) / keep
    return h * mask, mask


def gcn_forward(params: ModelParams, adj: NormalizedAdjacency, x, *, activation: str = "relu",
                dropout: float = 0.0, input_dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """H^(l) = act(A H^(l-1) W_l + b_l); the last layer returns raw logits."""
    if x.shape[1] != params.dims[0]:
        raise SchemaError(f"input has {x.shape[1]} columns, model expects {params.dims[0]}")
    if x.shape[0] != adj.n:
        raise SchemaError(f"input has {x.shape[0]} rows, adjacency has {adj.n}")
    trace = ForwardTrace([], [], [], [], activation)
    h = x
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        rate = input_dropout if layer == 0 else dropout
        mask = None
        if rate > 0 and rng is not None:
            h, mask = _dropout(h, rate, rng)
        trace.inputs.append(h)
        trace.masks.append(mask)
        z = spmm(adj, _matmul(h, w))
        if b is not None:
            z = z + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite values in layer {layer + 1}")
        trace.pre.append(z)
        if layer < params.depth - 1:
            h = _act(z, activation)
            trace.acts.append(h)
    return trace.pre[-1], trace


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                          mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean NLL over ``mask``; ``targets`` is indexed by node (length n)."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty mask")
    t = np.asarray(targets)[mask]
    if t.min() < 0 or t.max() >= logits.shape[1]:
        raise ValueError("target class out of range")
    logp = log_softmax(logits[mask])
    loss = -float(logp[np.arange(len(mask)), t].mean())
    g = np.exp(logp)
    g[np.arange(len(mask)), t] -= 1
    grad = np.zeros_like(logits)
    np.add.at(grad, mask, g / len(mask))
    return loss, grad


def backward(trace: ForwardTrace, adj: NormalizedAdjacency, grad_logits: np.ndarray,
             params: ModelParams, weight_decay: float = 0.0) -> ModelParams:
    """Reverse-mode gradients of the traced forward pass.

    ``weight_decay`` adds the gradient of ``wd/2 * sum ||W||^2`` (weights only).
    """
    if grad_logits.shape != trace.pre[-1].shape:
        raise SchemaError("grad_logits shape does not match traced logits")
    at = adj.matrix.T
    grads = params.zeros_like()
    g = grad_logits
    for layer in range(params.depth - 1, -1, -1):
        if params.biases[layer] is not None:
            grads.biases[layer] = g.sum(axis=0)
        dp = np.asarray(at @ g)
        grads.weights[layer] = np.asarray(trace.inputs[layer].T @ dp)
        if weight_decay:
            grads.weights[layer] = grads.weights[layer] + weight_decay * params.weights[layer]
        if layer == 0:
            break
        dh = dp @ params.weights[layer].T
        if trace.masks[layer] is not None:
            dh = dh * trace.masks[layer]
        z, a = trace.pre[layer - 1], trace.acts[layer - 1]
        g = dh * _act_grad(z, a, trace.activation)
    return grads


def weight_decay_penalty(params: ModelParams, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(float(np.sum(w.astype(np.float64) ** 2)) for w in params.weights)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    t = state.t + 1
    new = params.copy()
    new_arrays = new.arrays()
    grad_arrays = grads.arrays()
    if len(new_arrays) != len(state.m) or len(grad_arrays) != len(state.m):
        raise SchemaError("optimizer state does not match parameters")
    ms, vs = [], []
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(new_arrays, grad_arrays, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        ms.append(m)
        vs.append(v)
    return new, AdamState(ms, vs, t)


def gradient_check(params: ModelParams, adj: NormalizedAdjacency, x, targets: np.ndarray,
                   eps: float = 1e-6, *, mask: np.ndarray | None = None,
                   activation: str = "relu", weight_decay: float = 0.0,
                   n_samples: int | None = 200, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64. With ``n_samples=None`` every coordinate is checked.
    """
    p64 = params.astype(np.float64)
    adj64 = adj.astype(np.float64)
    x64 = x.astype(np.float64)
    mask = np.arange(adj.n) if mask is None else np.asarray(mask)

    def loss_of(p):
        logits, _ = gcn_forward(p, adj64, x64, activation=activation)
        return softmax_cross_entropy(logits, targets, mask)[0] + weight_decay_penalty(p, weight_decay)

    logits, trace = gcn_forward(p64, adj64, x64, activation=activation)
    _, g = softmax_cross_entropy(logits, targets, mask)
    analytic = backward(trace, adj64, g, p64, weight_decay).arrays()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for arr, grad in zip(p64.arrays(), analytic):
        coords = list(np.ndindex(arr.shape))
        if n_samples is not None and len(coords) > n_samples:
            coords = [coords[i] for i in rng.choice(len(coords), n_samples, replace=False)]
        for idx in coords:
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_of(p64)
            arr[idx] = orig - eps
            down = loss_of(p64)
            arr[idx] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(numeric - grad[idx]) / max(abs(numeric), abs(grad[idx]), floor)
            worst = max(worst, rel)
    return worst


@dataclass
class LossTerm:
    """Weighted mean cross-entropy of one input's logits over a node set."""

    input_index: int
    nodes: np.ndarray
    targets: np.ndarray  # aligned with ``nodes``
    weight: float = 1.0


@dataclass
class FitResult:
    params: ModelParams
    best_epoch: int
    best_score: float | None
    losses: list[float] = field(default_factory=list)


def prepare_input(x, dtype=np.float32, density_cutoff: float = 0.25):
    """Store inputs sparse when mostly zero; products stay exact either way."""
    if sp.issparse(x):
        return x.astype(dtype).tocsr()
    x = np.asarray(x)
    if x.size and np.count_nonzero(x) / x.size < density_cutoff:
        return sp.csr_matrix(x.astype(dtype))
    return x.astype(dtype)


def fit(params: ModelParams, adj: NormalizedAdjacency, inputs: Sequence, terms: Sequence[LossTerm],
        config: TrainConfig, evaluate: Callable[[ModelParams], float] | None = None) -> FitResult:
    """Full-batch Adam training with optional early stopping on ``evaluate``.

    The loss is ``sum(term.weight * CE(term))`` plus L2 weight decay. When
    ``evaluate`` is given the parameters with the best score are returned.
    """
    rng = np.random.default_rng(config.seed + 7919)
    state = AdamState.for_params(params)
    n = adj.n
    full_targets = []
    for term in terms:
        t = np.zeros(n, dtype=np.int64)
        t[term.nodes] = term.targets
        full_targets.append(t)
    used = sorted({t.input_index for t in terms if len(t.nodes)})
    best = params.copy()
    best_score, best_epoch, waited = None, 0, 0
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        grads = params.zeros_like()
        for idx in used:
            logits, trace = gcn_forward(params, adj, inputs[idx], activation=config.activation,
                                        dropout=config.dropout,
                                        input_dropout=config.input_dropout, rng=rng)
            g_logits = np.zeros_like(logits)
            for term, tgt in zip(terms, full_targets):
                if term.input_index != idx or len(term.nodes) == 0 or term.weight == 0:
                    continue
                loss, g = softmax_cross_entropy(logits, tgt, term.nodes)
                total += term.weight * loss
                g_logits += term.weight * g
            part = backward(trace, adj, g_logits, params)
            for a, b in zip(grads.arrays(), part.arrays()):
                a += b
        if config.weight_decay:
            total += weight_decay_penalty(params, config.weight_decay)
            for gw, w in zip(grads.weights, params.weights):
                gw += config.weight_decay * w
        if not math.isfinite(total):
            raise TrainingError(epoch, "loss is not finite")
        losses.append(total)
        params, state = adam_step(params, grads, state, config.lr)
        if evaluate is None:
            continue
        score = evaluate(params)
        if best_score is None or score > best_score:
            best, best_score, best_epoch, waited = params.copy(), score, epoch, 0
        else:
            waited += 1
            if config.patience is not None and waited >= config.patience:
                break
    if evaluate is None:
        return FitResult(params, config.epochs, None, losses)
    return FitResult(best, best_epoch, best_score, losses)


def predict_logits(params: ModelParams, adj: NormalizedAdjacency, x,
                   activation: str = "relu") -> np.ndarray:
    return gcn_forward(params, adj, x, activation=activation)[0]


def hidden_representation(params: ModelParams, adj: NormalizedAdjacency, x,
                          activation: str = "relu") -> np.ndarray:
    """Activations of the last hidden layer at inference time."""
    _, trace = gcn_forward(params, adj, x, activation=activation)
    return trace.acts[-1] if trace.acts else np.asarray(x.todense() if sp.issparse(x) else x)


def save_params(params: ModelParams, path) -> None:
    layers = []
    for w, b in zip(params.weights, params.biases):
        layers.append({
            "rows": w.shape[0],
            "cols": w.shape[1],
            "dtype": str(w.dtype),
            "weight": w.ravel(order="C").tolist(),
            "bias": None if b is None else b.tolist(),
        })
    Path(path).write_text(json.dumps({"format": "difac-params-v1", "layers": layers}))


def load_params(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    weights, biases = [], []
    for layer in doc["layers"]:
        dtype = np.dtype(layer["dtype"])
        weights.append(np.asarray(layer["weight"], dtype=dtype).reshape(layer["rows"], layer["cols"]))
        biases.append(None if layer["bias"] is None else np.asarray(layer["bias"], dtype=dtype))
    return ModelParams(weights, biases)
