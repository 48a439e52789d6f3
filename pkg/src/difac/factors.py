"""Differentiated factor inputs, block-extended labels, and factor training.

One network hosts ``K`` decision factors. Factor ``k`` sees its own variant
of the feature matrix and owns the logit block ``[k*C, (k+1)*C)``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapacityError, RecipeMismatchError
from .graph import CitationGraph, NormalizedAdjacency, SplitMasks
from .nn import (FitResult, LossTerm, ModelParams, TrainConfig, fit, gcn_forward, init_params,
                 log_softmax, prepare_input)

METHODS = ("marker", "random_reverse", "random_exchange", "none")
DEFAULT_OUTPUT_CAP = 512


@dataclass(frozen=True)
class DiffMethod:
    kind: str = "marker"
    perturb_frac: float = 0.05
    seed: int = 0
    exchange: str = "permute"  # or "pairwise"

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown construction method {self.kind!r}")
        if not 0.0 <= self.perturb_frac <= 1.0:
            raise ValueError("perturb_frac must lie in [0, 1]")
        if self.exchange not in ("permute", "pairwise"):
            raise ValueError(f"unknown exchange mode {self.exchange!r}")


@dataclass
class FactorizedInput:
    K: int
    variants: list[np.ndarray]
    method: DiffMethod
    columns: list[np.ndarray]  # perturbed columns per factor (empty for marker / factor 0)
    permutations: list[np.ndarray]  # column order applied to ``columns`` (exchange only)
    _prepared: dict = field(default_factory=dict, repr=False)

    @property
    def width(self) -> int:
        return self.variants[0].shape[1]

    def prepared(self, dtype=np.float32) -> list:
        key = np.dtype(dtype).str
        if key not in self._prepared:
            self._prepared[key] = [prepare_input(v, dtype) for v in self.variants]
        return self._prepared[key]

    def recipe(self) -> dict:
        return {
            "K": self.K,
            "method": asdict(self.method),
            "width": self.width,
            "columns": [c.tolist() for c in self.columns],
            "permutations": [p.tolist() for p in self.permutations],
        }

    def recipe_json(self) -> str:
        return json.dumps(self.recipe(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.recipe_json().encode()).hexdigest()[:16]


def build_factor_inputs(x: np.ndarray, K: int, method: DiffMethod | None = None,
                        n_classes: int | None = None,
                        output_cap: int = DEFAULT_OUTPUT_CAP) -> FactorizedInput:
    """Build ``K`` input variants; variant 0 is always the untouched reference."""
    method = method or DiffMethod()
    if K < 1:
        raise ValueError("K must be >= 1")
    if n_classes is not None and K * n_classes > output_cap:
        raise CapacityError(f"K*C = {K * n_classes} exceeds output cap {output_cap}")
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    rng = np.random.default_rng(method.seed)
    variants, columns, perms = [], [], []
    if method.kind == "marker":
        for k in range(K):
            tag = np.zeros((n, K))
            tag[:, k] = 1.0
            variants.append(np.hstack([x, tag]))
            columns.append(np.zeros(0, dtype=np.int64))
            perms.append(np.zeros(0, dtype=np.int64))
        return FactorizedInput(K, variants, method, columns, perms)

    m = 0 if method.kind == "none" else math.floor(method.perturb_frac * d)
    col_max = x.max(axis=0) if n else np.zeros(d)
    for k in range(K):
        if k == 0 or m == 0:
            variants.append(x.copy())
            columns.append(np.zeros(0, dtype=np.int64))
            perms.append(np.zeros(0, dtype=np.int64))
            continue
        cols = np.sort(rng.choice(d, size=m, replace=False))
        v = x.copy()
        if method.kind == "random_reverse":
            v[:, cols] = col_max[cols] - v[:, cols]
            perm = np.zeros(0, dtype=np.int64)
        else:
            perm = _exchange_order(m, method.exchange, rng)
            v[:, cols] = x[:, cols[perm]]
        variants.append(v)
        columns.append(cols)
        perms.append(perm)
    return FactorizedInput(K, variants, method, columns, perms)


def _exchange_order(m: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "permute":
        return rng.permutation(m)
    # disjoint pair swaps; an odd leftover column stays in place
    order = rng.permutation(m)
    perm = np.arange(m)
    for a, b in zip(order[0::2], order[1::2]):
        perm[a], perm[b] = b, a
    return perm


def extend_labels(y, k, C: int, K: int | None = None):
    """Block encoding ``k*C + y`` (works elementwise on arrays)."""
    y_arr, k_arr = np.asarray(y), np.asarray(k)
    if np.any(y_arr < 0) or np.any(y_arr >= C):
        raise ValueError("class index out of range")
    if np.any(k_arr < 0) or (K is not None and np.any(k_arr >= K)):
        raise ValueError("factor index out of range")
    out = k_arr * C + y_arr
    return int(out) if out.ndim == 0 else out


def decode_label(e, C: int):
    """Inverse of :func:`extend_labels`: returns ``(k, y)``."""
    k, y = np.divmod(np.asarray(e), C)
    if k.ndim == 0:
        return int(k), int(y)
    return k, y


@dataclass
class FactorModel:
    params: ModelParams
    K: int
    C: int
    recipe_digest: str
    label_mode: str = "block"  # "shared": every factor uses the same C-way head
    activation: str = "relu"

    def block_log_probs(self, logits: np.ndarray, k: int) -> np.ndarray:
        if self.label_mode == "shared":
            return log_softmax(logits)
        return log_softmax(logits[:, k * self.C:(k + 1) * self.C])

    def target(self, k: int, y):
        return y if self.label_mode == "shared" else extend_labels(y, k, self.C)


@dataclass
class FactorPredictions:
    nodes: np.ndarray
    probs: np.ndarray  # (len(nodes), K, C)

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def argmax(self) -> np.ndarray:
        """Per-node, per-factor predicted class; ties go to the lowest index."""
        return self.probs.argmax(axis=2)

    def max_prob(self) -> np.ndarray:
        return self.probs.max(axis=2)

    def subset(self, nodes) -> "FactorPredictions":
        pos = {int(v): i for i, v in enumerate(self.nodes)}
        idx = np.array([pos[int(v)] for v in nodes], dtype=np.int64)
        return FactorPredictions(np.asarray(nodes, dtype=np.int64), self.probs[idx])


def factor_loss_terms(model: FactorModel, nodes: np.ndarray, classes: np.ndarray,
                      weight: float) -> list[LossTerm]:
    """One term per factor, each pulling factor ``k`` toward ``classes`` in its own block."""
    nodes = np.asarray(nodes, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    return [LossTerm(k, nodes, np.asarray(model.target(k, classes)), weight / model.K)
            for k in range(model.K)]


def new_factor_model(factorized: FactorizedInput, C: int, config: TrainConfig,
                     label_mode: str = "block") -> FactorModel:
    out = C if label_mode == "shared" else factorized.K * C
    params = init_params([factorized.width, config.hidden, out], seed=config.seed,
                         dtype=np.dtype(config.dtype))
    return FactorModel(params, factorized.K, C, factorized.digest(), label_mode,
                       config.activation)


def train_factors(graph: CitationGraph, adj: NormalizedAdjacency, factorized: FactorizedInput,
                  masks: SplitMasks, config: TrainConfig, *,
                  pseudo_nodes: np.ndarray | None = None, pseudo_classes: np.ndarray | None = None,
                  lambda_pseudo: float = 1.0, init: FactorModel | None = None,
                  label_mode: str = "block", early_stop: bool = True) -> tuple[FactorModel, FitResult]:
    """Train one shared network that hosts all ``K`` factors.

    The labeled term is the mean over factors of each factor's cross-entropy
    on the training nodes; pseudo-labeled nodes add a ``lambda_pseudo``
    weighted term of the same form. Early stopping watches factor-0
    validation accuracy.
    """
    if len(masks.train) == 0:
        raise ValueError("training set is empty")
    model = init or new_factor_model(factorized, graph.c, config, label_mode)
    if model.recipe_digest != factorized.digest():
        raise RecipeMismatchError("model was built for a different factor recipe")
    model = FactorModel(model.params.copy(), model.K, model.C, model.recipe_digest,
                        model.label_mode, model.activation)
    dtype = np.dtype(config.dtype)
    inputs = factorized.prepared(dtype)
    adj_t = adj.astype(dtype)
    terms = factor_loss_terms(model, masks.train, graph.labels[masks.train], 1.0)
    if pseudo_nodes is not None and len(pseudo_nodes) and lambda_pseudo > 0:
        terms += factor_loss_terms(model, pseudo_nodes, pseudo_classes, lambda_pseudo)

    evaluate = None
    if early_stop and len(masks.val):
        val_y = graph.labels[masks.val]

        def evaluate(p: ModelParams) -> float:
            logits, _ = gcn_forward(p, adj_t, inputs[0], activation=model.activation)
            pred = model.block_log_probs(logits[masks.val], 0).argmax(axis=1)
            return float(np.mean(pred == val_y))

    result = fit(model.params, adj_t, inputs, terms, config, evaluate)
    model.params = result.params
    return model, result


def factor_predict(model: FactorModel, adj: NormalizedAdjacency, factorized: FactorizedInput,
                   nodes=None, dtype=None) -> FactorPredictions:
    if model.recipe_digest != factorized.digest() or model.K != factorized.K:
        raise RecipeMismatchError("predictions requested with a different factor recipe")
    nodes = np.arange(adj.n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    dtype = np.dtype(dtype or model.params.weights[0].dtype)
    inputs = factorized.prepared(dtype)
    adj_t = adj.astype(dtype)
    probs = np.empty((len(nodes), model.K, model.C))
    for k in range(model.K):
        logits, _ = gcn_forward(model.params, adj_t, inputs[k], activation=model.activation)
        probs[:, k, :] = np.exp(model.block_log_probs(logits[nodes].astype(np.float64), k))
    return FactorPredictions(nodes, probs)


def factor_hidden(model: FactorModel, adj: NormalizedAdjacency, factorized: FactorizedInput,
                  k: int = 0) -> np.ndarray:
    dtype = model.params.weights[0].dtype
    _, trace = gcn_forward(model.params, adj.astype(dtype), factorized.prepared(dtype)[k],
                           activation=model.activation)
    return trace.acts[-1].astype(np.float64)
