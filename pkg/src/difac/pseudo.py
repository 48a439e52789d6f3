"""Consistency-filtered pseudo-labeling loop and its two baselines."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .factors import (FactorModel, FactorPredictions, FactorizedInput, factor_loss_terms,
                      factor_predict, train_factors)
from .graph import CitationGraph, NormalizedAdjacency, SplitMasks
from .metrics import pseudo_accuracy
from .nn import ModelParams, TrainConfig, backward, gcn_forward, softmax_cross_entropy

log = logging.getLogger(__name__)

RANK_STRATEGIES = ("min", "max", "mean")


@dataclass
class PseudoLabelSet:
    nodes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray  # s: min-confidence (or the configured strategy)
    adjusted: np.ndarray  # s~: after accountability rescoring
    stage: str = "consistent"  # or "selected"

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.adjusted = np.asarray(self.adjusted, dtype=np.float64)
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ContractError("pseudo-label set contains duplicate nodes")

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def empty(cls, stage: str = "consistent") -> "PseudoLabelSet":
        z = np.zeros(0)
        return cls(z, z, z, z, stage)

    def node_set(self) -> set[int]:
        return set(self.nodes.tolist())

    def with_adjusted(self, adjusted) -> "PseudoLabelSet":
        return PseudoLabelSet(self.nodes, self.classes, self.scores, adjusted, self.stage)


@dataclass
class LoopConfig:
    iters: int = 5
    tau0: float = 0.3
    tau_final: float = 0.9
    lambda_pseudo: float = 1.0
    lambda_acc: float = 0.5
    jaccard_stop: float = 0.99
    from_scratch: bool = False
    rank: str = "min"
    accumulate: bool = False
    output_factor: int = 0

    def __post_init__(self):
        if not 0 < self.tau0 <= self.tau_final <= 1:
            raise ValueError("need 0 < tau0 <= tau_final <= 1")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.lambda_pseudo < 0 or self.lambda_acc < 0:
            raise ValueError("balance coefficients must be non-negative")
        if self.rank not in RANK_STRATEGIES:
            raise ValueError(f"unknown rank strategy {self.rank!r}")


@dataclass
class IterationRecord:
    iteration: int
    tau: float
    n_consistent: int
    n_selected: int
    pseudo_acc_consistent: float | None
    pseudo_acc: float | None
    val_acc: float
    test_acc: float
    jaccard: float | None


@dataclass
class LoopReport:
    rows: list[IterationRecord] = field(default_factory=list)
    selected: list[np.ndarray] = field(default_factory=list)
    best_iteration: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(IterationRecord.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names)
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(row).items()})
        return buf.getvalue()

    def summary(self) -> dict:
        best = self.rows[self.best_iteration] if self.rows else None
        return {
            "iterations": len(self.rows),
            "best_iteration": self.best_iteration,
            "best_val_acc": None if best is None else best.val_acc,
            "test_acc": None if best is None else best.test_acc,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def consistency_filter(preds: FactorPredictions, candidates=None) -> PseudoLabelSet:
    """Keep candidates on which every factor's argmax agrees."""
    if candidates is not None:
        preds = preds.subset(candidates)
    am = preds.argmax()
    agree = np.all(am == am[:, :1], axis=1)
    nodes = preds.nodes[agree]
    scores = preds.max_prob()[agree].min(axis=1)
    return PseudoLabelSet(nodes, am[agree, 0], scores, scores, "consistent")


def min_confidence(preds: FactorPredictions, node: int) -> float:
    """Smallest per-factor top probability of a consistent node."""
    sub = preds.subset([node])
    am = sub.argmax()[0]
    if np.any(am != am[0]):
        raise ContractError(f"node {node} is not consistent across factors")
    return float(sub.max_prob()[0].min())


def confidence_scores(preds: FactorPredictions, nodes, strategy: str = "min") -> np.ndarray:
    mp = preds.subset(nodes).max_prob()
    if strategy == "min":
        return mp.min(axis=1)
    if strategy == "max":
        return mp.max(axis=1)
    if strategy == "mean":
        return mp.mean(axis=1)
    raise ValueError(f"unknown rank strategy {strategy!r}")


def _take(n: int, tau: float) -> int:
    return min(n, math.ceil(tau * n - 1e-9))


def rank_select(su: PseudoLabelSet, tau: float) -> PseudoLabelSet:
    """Top ``ceil(tau * |su|)`` by adjusted score; ties by ascending node index."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    if len(su) == 0:
        return PseudoLabelSet.empty("selected")
    order = np.lexsort((su.nodes, -su.adjusted))[:_take(len(su), tau)]
    return PseudoLabelSet(su.nodes[order], su.classes[order], su.scores[order],
                          su.adjusted[order], "selected")


def tau_schedule(t: int, config: LoopConfig) -> float:
    """Linear ramp from ``tau0`` at t=0 to ``tau_final`` at t=iters-1."""
    if not 0 <= t < config.iters:
        raise ValueError(f"iteration {t} outside [0, {config.iters})")
    if config.iters == 1:
        return config.tau_final
    frac = t / (config.iters - 1)
    return config.tau0 + frac * (config.tau_final - config.tau0)


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def joint_loss(model: FactorModel, adj: NormalizedAdjacency, factorized: FactorizedInput,
               labeled: np.ndarray, labels: np.ndarray, sp_set: PseudoLabelSet,
               lambda_pseudo: float) -> tuple[float, float, float, ModelParams]:
    """``L = L_s + lambda * L_u`` at inference mode (no dropout).

    Returns ``(L, L_s, L_u, grads)``; ``labels`` is indexed by node. Each
    term is the mean over factors of per-factor mean cross-entropy.
    """
    labeled = np.asarray(labeled, dtype=np.int64)
    if set(labeled.tolist()) & sp_set.node_set():
        raise ContractError("labeled and pseudo-labeled node sets overlap")
    dtype = model.params.weights[0].dtype
    inputs = factorized.prepared(dtype)
    adj_t = adj.astype(dtype)
    sup = factor_loss_terms(model, labeled, np.asarray(labels)[labeled], 1.0)
    pse = factor_loss_terms(model, sp_set.nodes, sp_set.classes, 1.0) if len(sp_set) else []
    n = adj.n
    ls = lu = 0.0
    grads = model.params.zeros_like()
    for k in range(model.K):
        logits, trace = gcn_forward(model.params, adj_t, inputs[k], activation=model.activation)
        logits = logits.astype(np.float64)
        g = np.zeros_like(logits)
        for term, bucket in [(t, "s") for t in sup if t.input_index == k] + \
                            [(t, "u") for t in pse if t.input_index == k]:
            full = np.zeros(n, dtype=np.int64)
            full[term.nodes] = term.targets
            loss, gt = softmax_cross_entropy(logits, full, term.nodes)
            if bucket == "s":
                ls += term.weight * loss
                g += term.weight * gt
            else:
                lu += term.weight * loss
                g += lambda_pseudo * term.weight * gt
        part = backward(trace, adj_t, g.astype(dtype), model.params)
        for a, b in zip(grads.arrays(), part.arrays()):
            a += b
    return ls + lambda_pseudo * lu, ls, lu, grads


# ---------------------------------------------------------------------------
# outer loop


def _evaluate(model: FactorModel, adj, factorized, graph, masks, k: int):
    preds = factor_predict(model, adj, factorized)
    pred = preds.probs[:, min(k, model.K - 1), :].argmax(axis=1)
    val = float(np.mean(pred[masks.val] == graph.labels[masks.val])) if len(masks.val) else 0.0
    test = float(np.mean(pred[masks.test] == graph.labels[masks.test])) if len(masks.test) else 0.0
    return preds, val, test


def run_pseudo_loop(graph: CitationGraph, adj: NormalizedAdjacency, factorized: FactorizedInput,
                    masks: SplitMasks, train_config: TrainConfig, loop_config: LoopConfig,
                    select: Callable[[FactorPredictions, np.ndarray, float],
                                     tuple[PseudoLabelSet, PseudoLabelSet]],
                    candidates: np.ndarray | None = None) -> tuple[FactorModel, LoopReport]:
    """Shared train -> predict -> select -> retrain skeleton.

    ``select(preds, candidates, tau)`` returns ``(S_u, S_p)``. The pseudo set
    is recomputed every round unless ``loop_config.accumulate`` is set.
    """
    candidates = masks.unlabeled(graph.n) if candidates is None else np.asarray(candidates)
    model, _ = train_factors(graph, adj, factorized, masks, train_config)
    preds, val, test = _evaluate(model, adj, factorized, graph, masks, loop_config.output_factor)
    report = LoopReport([IterationRecord(0, 0.0, 0, 0, None, None, val, test, None)], [])
    best_model, best_val = model, val
    prev: np.ndarray | None = None
    adopted: dict[int, int] = {}
    for t in range(loop_config.iters):
        if len(candidates) == 0:
            break
        tau = tau_schedule(t, loop_config)
        su, sp_set = select(preds, candidates, tau)
        if loop_config.accumulate:
            adopted.update(zip(sp_set.nodes.tolist(), sp_set.classes.tolist()))
            nodes = np.array(sorted(adopted), dtype=np.int64)
            classes = np.array([adopted[v] for v in nodes.tolist()], dtype=np.int64)
        else:
            nodes, classes = sp_set.nodes, sp_set.classes
        init = None if loop_config.from_scratch else model
        model, _ = train_factors(graph, adj, factorized, masks, train_config,
                                 pseudo_nodes=nodes, pseudo_classes=classes,
                                 lambda_pseudo=loop_config.lambda_pseudo, init=init)
        preds, val, test = _evaluate(model, adj, factorized, graph, masks,
                                     loop_config.output_factor)
        jac = None if prev is None else jaccard(prev, sp_set.nodes)
        report.rows.append(IterationRecord(
            t + 1, tau, len(su), len(sp_set),
            pseudo_accuracy(su, graph.labels) if len(su) else None,
            pseudo_accuracy(sp_set, graph.labels) if len(sp_set) else None,
            val, test, jac))
        report.selected.append(np.sort(sp_set.nodes))
        log.info("round %d: |S_u|=%d |S_p|=%d val=%.4f test=%.4f", t + 1, len(su), len(sp_set),
                 val, test)
        if val > best_val:
            best_model, best_val, report.best_iteration = model, val, t + 1
        if jac is not None and jac >= loop_config.jaccard_stop:
            break
        prev = sp_set.nodes
    return best_model, report


def difac_selector(loop_config: LoopConfig, aux: Sequence | None = None):
    from .auxiliary import rescore  # local import keeps module layering one-way

    def select(preds: FactorPredictions, candidates: np.ndarray, tau: float):
        su = consistency_filter(preds, candidates)
        if len(su):
            su.scores = confidence_scores(preds, su.nodes, loop_config.rank)
            su.adjusted = su.scores.copy()
            if aux:
                su = rescore(su, aux, loop_config.lambda_acc)
        return su, rank_select(su, tau)

    return select


def difac_loop(graph: CitationGraph, adj: NormalizedAdjacency, factorized: FactorizedInput,
               masks: SplitMasks, train_config: TrainConfig, loop_config: LoopConfig,
               aux: Sequence | None = None) -> tuple[FactorModel, LoopReport]:
    return run_pseudo_loop(graph, adj, factorized, masks, train_config, loop_config,
                           difac_selector(loop_config, aux))


def max_prob_top(preds: FactorPredictions, candidates: np.ndarray, tau: float,
                 factor: int = 0) -> PseudoLabelSet:
    """Top-``tau`` candidates by a single factor's top probability."""
    p = preds.subset(candidates).probs[:, factor, :]
    conf = p.max(axis=1)
    cls = p.argmax(axis=1)
    keep = np.lexsort((np.asarray(candidates), -conf))[:_take(len(candidates), tau)]
    nodes = np.asarray(candidates, dtype=np.int64)
    return PseudoLabelSet(nodes[keep], cls[keep], conf[keep], conf[keep], "selected")


def self_training_baseline(graph: CitationGraph, adj: NormalizedAdjacency,
                           factorized: FactorizedInput, masks: SplitMasks,
                           train_config: TrainConfig, loop_config: LoopConfig):
    """Classic self-training: adopt the top-``tau`` most confident predictions."""
    if factorized.K != 1:
        raise ValueError("self-training uses a single-factor input")

    def select(preds, candidates, tau):
        chosen = max_prob_top(preds, candidates, tau)
        all_nodes = PseudoLabelSet(np.asarray(candidates),
                                   preds.subset(candidates).argmax()[:, 0],
                                   preds.subset(candidates).max_prob()[:, 0],
                                   preds.subset(candidates).max_prob()[:, 0])
        return all_nodes, chosen

    return run_pseudo_loop(graph, adj, factorized, masks, train_config, loop_config, select)


def label_propagation(adj: NormalizedAdjacency, labels: np.ndarray, seeds: np.ndarray, C: int,
                      alpha: float = 0.9, iters: int = 50) -> np.ndarray:
    """Iterate ``Y <- alpha * A Y + (1 - alpha) * Y0``; rows renormalized to sum 1."""
    y0 = np.zeros((adj.n, C))
    y0[seeds, labels[seeds]] = 1.0
    y = y0.copy()
    for _ in range(iters):
        y = alpha * np.asarray(adj.matrix @ y) + (1 - alpha) * y0
    s = y.sum(axis=1, keepdims=True)
    out = np.full_like(y, 1.0 / C)
    np.divide(y, s, out=out, where=s > 0)
    return out


def intersect_judges(first: PseudoLabelSet, second: PseudoLabelSet) -> PseudoLabelSet:
    """Nodes in both sets whose predicted classes agree (ordered as in ``first``)."""
    other = dict(zip(second.nodes.tolist(), second.classes.tolist()))
    keep = np.array([other.get(v) == c for v, c in zip(first.nodes.tolist(),
                                                        first.classes.tolist())], dtype=bool)
    if not len(first):
        return PseudoLabelSet.empty("selected")
    return PseudoLabelSet(first.nodes[keep], first.classes[keep], first.scores[keep],
                          first.adjusted[keep], "selected")


def intersection_baseline(graph: CitationGraph, adj: NormalizedAdjacency,
                          factorized: FactorizedInput, masks: SplitMasks,
                          train_config: TrainConfig, loop_config: LoopConfig,
                          alpha: float = 0.9, lp_iters: int = 50):
    """Adopt nodes picked by both the self-training GCN and a label-propagation judge."""
    if factorized.K != 1:
        raise ValueError("the intersection baseline uses a single-factor input")
    lp = label_propagation(adj, graph.labels, masks.train, graph.c, alpha, lp_iters)
    lp_preds = FactorPredictions(np.arange(graph.n), lp[:, None, :])

    def select(preds, candidates, tau):
        a = max_prob_top(preds, candidates, tau)
        b = max_prob_top(lp_preds, candidates, tau)
        both = intersect_judges(a, b)
        return a, both

    return run_pseudo_loop(graph, adj, factorized, masks, train_config, loop_config, select)
