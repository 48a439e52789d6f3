"""Citation graphs: plain-text loading, splits, adjacency normalization, masking."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CitationGraph:
    features: np.ndarray  # (n, d) float
    labels: np.ndarray  # (n,) int64 in [0, c)
    edges: np.ndarray  # (E, 2) int64, one row per undirected pair
    node_ids: tuple[str, ...]
    label_names: tuple[str, ...]
    dropped_edges: int = 0
    name: str = ""

    def __post_init__(self):
        n = len(self.node_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise SchemaError(f"features must be ({n}, d), got {self.features.shape}")
        if self.labels.shape != (n,):
            raise SchemaError(f"labels must have length {n}")
        if len(set(self.node_ids)) != n:
            raise SchemaError("node ids are not unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise SchemaError("label index out of range")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise SchemaError("edge endpoint out of range")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError("non-finite feature values")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return len(self.label_names)

    def with_features(self, features: np.ndarray) -> "CitationGraph":
        return replace(self, features=features)


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    per_class_train: int
    seed: int = 0

    def unlabeled(self, n: int) -> np.ndarray:
        """All node indices outside the training set."""
        keep = np.ones(n, dtype=bool)
        keep[self.train] = False
        return np.flatnonzero(keep)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Symmetric D^-1/2 (A + I) D^-1/2 in CSR form."""

    matrix: sp.csr_matrix
    degrees: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def astype(self, dtype) -> "NormalizedAdjacency":
        return NormalizedAdjacency(self.matrix.astype(dtype), self.degrees)


def load_citation_dataset(content_path, cites_path, name: str = "") -> CitationGraph:
    """Read a `.content` / `.cites` pair.

    Content rows are ``<id> <f_1..f_d> <label>``; cites rows are
    ``<cited> <citing>``. Labels are indexed by first appearance. Citations
    touching unknown ids, self-citations and duplicate pairs are dropped.
    """
    content_path, cites_path = Path(content_path), Path(cites_path)
    ids: list[str] = []
    rows: list[list[float]] = []
    label_strings: list[str] = []
    width = None
    with content_path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ParseError(content_path, line_no, "expected id, features and label")
            try:
                values = [float(v) for v in parts[1:-1]]
            except ValueError as exc:
                raise ParseError(content_path, line_no, str(exc)) from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise SchemaError(
                    f"{content_path}:{line_no}: expected {width} features, got {len(values)}"
                )
            ids.append(parts[0])
            rows.append(values)
            label_strings.append(parts[-1])

    label_index: dict[str, int] = {}
    for s in label_strings:
        label_index.setdefault(s, len(label_index))
    labels = np.array([label_index[s] for s in label_strings], dtype=np.int64)
    position = {nid: i for i, nid in enumerate(ids)}
    if len(position) != len(ids):
        raise SchemaError(f"{content_path}: duplicate node ids")

    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    unknown = 0
    with cites_path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(cites_path, line_no, "expected two node ids")
            a, b = position.get(parts[0]), position.get(parts[1])
            if a is None or b is None:
                unknown += 1
                continue
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            edges.append((a, b))
    if unknown:
        log.warning("%s: dropped %d citations referencing unknown ids", cites_path, unknown)

    features = np.asarray(rows, dtype=np.float64).reshape(len(ids), width or 0)
    return CitationGraph(
        features=features,
        labels=labels,
        edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        node_ids=tuple(ids),
        label_names=tuple(label_index),
        dropped_edges=unknown,
        name=name or content_path.stem,
    )


def load_named_dataset(data_dir, name: str) -> CitationGraph:
    data_dir = Path(data_dir)
    return load_citation_dataset(data_dir / f"{name}.content", data_dir / f"{name}.cites", name=name)


def write_citation_files(graph: CitationGraph, directory, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    content = directory / f"{name}.content"
    cites = directory / f"{name}.cites"
    with content.open("w") as fh:
        for i, nid in enumerate(graph.node_ids):
            feats = " ".join(_fmt(v) for v in graph.features[i])
            fh.write(f"{nid}\t{feats}\t{graph.label_names[graph.labels[i]]}\n")
    with cites.open("w") as fh:
        for a, b in graph.edges:
            fh.write(f"{graph.node_ids[a]}\t{graph.node_ids[b]}\n")
    return content, cites


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def graph_to_json(graph: CitationGraph) -> str:
    return json.dumps(
        {
            "name": graph.name,
            "nodes": list(graph.node_ids),
            "label_names": list(graph.label_names),
            "labels": graph.labels.tolist(),
            "features": graph.features.tolist(),
            "edges": graph.edges.tolist(),
        }
    )


def graph_from_json(text: str) -> CitationGraph:
    doc = json.loads(text)
    n = len(doc["nodes"])
    return CitationGraph(
        features=np.asarray(doc["features"], dtype=np.float64).reshape(n, -1),
        labels=np.asarray(doc["labels"], dtype=np.int64),
        edges=np.asarray(doc["edges"], dtype=np.int64).reshape(-1, 2),
        node_ids=tuple(doc["nodes"]),
        label_names=tuple(doc["label_names"]),
        name=doc.get("name", ""),
    )


def standard_split(graph: CitationGraph, per_class: int = 20, n_val: int = 500,
                   n_test: int = 1000, seed: int = 0) -> SplitMasks:
    """Planetoid-style split regenerated from a seed.

    Nodes are shuffled once; the first ``per_class`` of every class form the
    training set, the next ``n_val`` remaining nodes the validation set and
    the following ``n_test`` the test set.
    """
    if per_class * graph.c + n_val + n_test > graph.n:
        raise SplitError(
            f"split needs {per_class * graph.c + n_val + n_test} nodes, graph has {graph.n}"
        )
    order = np.random.default_rng(seed).permutation(graph.n)
    train: list[int] = []
    for cls in range(graph.c):
        members = order[graph.labels[order] == cls]
        if len(members) < per_class:
            raise SplitError(
                f"class {graph.label_names[cls]!r} has {len(members)} nodes, need {per_class}"
            )
        train.extend(members[:per_class].tolist())
    in_train = np.zeros(graph.n, dtype=bool)
    in_train[train] = True
    rest = order[~in_train[order]]
    return SplitMasks(
        train=np.sort(np.asarray(train, dtype=np.int64)),
        val=np.sort(rest[:n_val]),
        test=np.sort(rest[n_val:n_val + n_test]),
        per_class_train=per_class,
        seed=seed,
    )


def normalize_adjacency(graph: CitationGraph, dtype=np.float64) -> NormalizedAdjacency:
    n = graph.n
    src, dst = graph.edges[:, 0], graph.edges[:, 1]
    a = sp.coo_matrix(
        (np.ones(2 * len(src)), (np.concatenate([src, dst]), np.concatenate([dst, src]))),
        shape=(n, n),
    ).tocsr()
    a.data[:] = 1.0  # collapse duplicate entries
    a.setdiag(0)
    a.eliminate_zeros()
    a = a + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    a = a.tocoo()
    vals = inv_sqrt[a.row] * a.data * inv_sqrt[a.col]
    m = sp.csr_matrix((vals, (a.row, a.col)), shape=(n, n))
    m.sort_indices()
    return NormalizedAdjacency(m.astype(dtype), deg)


def identity_adjacency(n: int, dtype=np.float64) -> NormalizedAdjacency:
    """Propagation that leaves rows untouched; turns the GCN into an MLP."""
    return NormalizedAdjacency(sp.identity(n, dtype=dtype, format="csr"), np.ones(n))


def mask_features(graph: CitationGraph, ratio: float, seed: int = 0,
                  per_node: bool = False) -> CitationGraph:
    """Zero ``floor(ratio * d)`` feature columns chosen uniformly at random.

    With ``per_node`` every node draws its own set of columns instead.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    d = graph.d
    k = math.floor(ratio * d)
    rng = np.random.default_rng(seed)
    x = graph.features.copy()
    if per_node:
        for i in range(graph.n):
            x[i, rng.choice(d, size=k, replace=False)] = 0.0
    else:
        x[:, rng.choice(d, size=k, replace=False)] = 0.0
    return graph.with_features(x)


def row_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each row to unit L1 norm; all-zero rows stay zero."""
    s = np.abs(features).sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return features / s


def make_synthetic_graph(n: int = 600, c: int = 4, d: int = 300, avg_degree: float = 4.0,
                         homophily: float = 0.8, words_per_node: int = 12,
                         topic_strength: float = 0.5, seed: int = 0,
                         name: str = "synthetic") -> CitationGraph:
    """Citation-like planted-partition graph with binary bag-of-words features.

    Each class owns a contiguous block of the vocabulary; a node draws each of
    its words from its class block with probability ``topic_strength`` and
    from the whole vocabulary otherwise. Edges connect same-class nodes with
    probability ``homophily``.
    """
    rng = np.random.default_rng(seed)
    labels = np.sort(rng.integers(0, c, size=n))
    labels = labels[rng.permutation(n)]
    blocks = np.array_split(np.arange(d), c)
    x = np.zeros((n, d))
    for i in range(n):
        own = rng.random(words_per_node) < topic_strength
        words = np.where(own, rng.choice(blocks[labels[i]], size=words_per_node),
                         rng.integers(0, d, size=words_per_node))
        x[i, words] = 1.0
    by_class = [np.flatnonzero(labels == k) for k in range(c)]
    pairs = set()
    n_edges = int(round(n * avg_degree / 2))
    while len(pairs) < n_edges:
        a = int(rng.integers(n))
        if rng.random() < homophily:
            b = int(rng.choice(by_class[labels[a]]))
        else:
            b = int(rng.integers(n))
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    edges = np.array(sorted(pairs), dtype=np.int64)
    # label names in first-appearance order so a file round trip is lossless
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    relabeled = np.array([order[int(lab)] for lab in labels], dtype=np.int64)
    inverse = {v: k for k, v in order.items()}
    return CitationGraph(
        features=x,
        labels=relabeled,
        edges=edges,
        node_ids=tuple(f"n{i}" for i in range(n)),
        label_names=tuple(f"class_{inverse[j]}" for j in range(len(order))),
        name=name,
    )
