"""Auxiliary judgment factors built from external description vectors.

Vectors come from an embedding/description service (cached on disk as
JSON lines), from a third-party JSON-lines dump, or from a deterministic
stub. Auxiliary factors only re-rank the consistent set; they never gate it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import httpx
import numpy as np

from .errors import CacheError, ContractError, FetchError, SchemaError
from .graph import CitationGraph, NormalizedAdjacency, SplitMasks, identity_adjacency
from .nn import LossTerm, ModelParams, TrainConfig, fit, gcn_forward, init_params, prepare_input, softmax

log = logging.getLogger(__name__)


@dataclass
class AuxVectorTable:
    node_ids: tuple[str, ...]
    vectors: np.ndarray  # (n, dim)
    provenance: list[str]  # per node: "remote" | "cache" | "stub" | "file"
    provider: str
    requests: int = 0

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.node_ids):
            raise SchemaError("need exactly one vector per node")
        if not np.all(np.isfinite(self.vectors)):
            raise SchemaError("non-finite description vector")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class AuxFactorOutput:
    classes: np.ndarray  # (n,) predicted class per node
    confidence: np.ndarray  # (n,) top probability
    name: str = "aux"
    probs: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_probs(cls, probs: np.ndarray, name: str) -> "AuxFactorOutput":
        return cls(probs.argmax(axis=1), probs.max(axis=1), name, probs)


@dataclass
class ProviderConfig:
    endpoint: str = ""
    token_env: str = "DIFAC_PROVIDER_TOKEN"
    timeout: float = 30.0
    retries: int = 3
    cache_path: str = "aux_cache.jsonl"
    dim: int | None = None
    model: str | None = None
    concurrency: int = 4
    backoff: float = 0.5

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def provider_id(self) -> str:
        return f"{self.endpoint}|{self.model or ''}"

    @classmethod
    def from_env(cls, **overrides) -> "ProviderConfig":
        cfg = {"endpoint": os.environ.get("DIFAC_PROVIDER_ENDPOINT", "")}
        cfg.update(overrides)
        return cls(**cfg)


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class VectorCache:
    """Append-only JSON-lines cache keyed by (node_id, provider, text_hash)."""

    def __init__(self, path):
        self.path = Path(path)
        self._entries: dict[tuple[str, str, str], list[float]] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line_no, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        key = (str(rec["node_id"]), rec["provider"], rec["text_hash"])
                        vec = [float(v) for v in rec["vector"]]
                    except (ValueError, KeyError, TypeError) as exc:
                        raise CacheError(f"{self.path}:{line_no}: corrupt record ({exc})") from None
                    self._entries[key] = vec

    def get(self, node_id: str, provider: str, digest: str):
        return self._entries.get((node_id, provider, digest))

    def append(self, node_id: str, provider: str, digest: str, vector: Sequence[float]) -> None:
        vec = [float(v) for v in vector]
        self._entries[(node_id, provider, digest)] = vec
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps({"node_id": node_id, "provider": provider,
                                 "text_hash": digest, "vector": vec}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


def _parse_vector(body) -> list[float]:
    if isinstance(body, list):
        return [float(v) for v in body]
    for key in ("vector", "embedding"):
        if key in body:
            return [float(v) for v in body[key]]
    if "data" in body and body["data"]:
        return [float(v) for v in body["data"][0]["embedding"]]
    raise ValueError("response contains no vector")


def request_vector(client: httpx.Client, provider: ProviderConfig, text: str) -> list[float]:
    headers = {}
    token = os.environ.get(provider.token_env) if provider.token_env else None
    if token:
        headers["Authorization"] = f"Bearer {token}"
    payload = {"input": text}
    if provider.model:
        payload["model"] = provider.model
    last = None
    for attempt in range(provider.retries + 1):
        try:
            resp = client.post(provider.endpoint, json=payload, headers=headers,
                               timeout=provider.timeout)
            resp.raise_for_status()
            return _parse_vector(resp.json())
        except (httpx.HTTPError, ValueError, KeyError) as exc:
            last = exc
            if attempt < provider.retries:
                time.sleep(provider.backoff * 2 ** attempt)
    raise RuntimeError(f"request failed after {provider.retries + 1} attempts: {last}")


def fetch_descriptions(provider: ProviderConfig, graph: CitationGraph, texts: Mapping[str, str],
                       client: httpx.Client | None = None) -> AuxVectorTable:
    """Vectors for every node, from cache when possible, otherwise from the service."""
    missing_text = [nid for nid in graph.node_ids if nid not in texts]
    if missing_text:
        raise ContractError(f"no text for node {missing_text[0]!r}"
                            + (f" (+{len(missing_text) - 1} more)" if len(missing_text) > 1 else ""))
    cache = VectorCache(provider.cache_path)
    pid = provider.provider_id
    vectors: dict[str, list[float]] = {}
    provenance: dict[str, str] = {}
    todo = []
    for nid in graph.node_ids:
        digest = text_hash(texts[nid])
        hit = cache.get(nid, pid, digest)
        if hit is not None:
            vectors[nid], provenance[nid] = hit, "cache"
        else:
            todo.append((nid, digest))

    requests = 0
    if todo:
        if not provider.endpoint:
            raise FetchError([nid for nid, _ in todo], "no provider endpoint configured")
        own = client is None
        client = client or httpx.Client()
        failed = []
        try:
            with ThreadPoolExecutor(max_workers=max(1, provider.concurrency)) as pool:
                futures = [(nid, digest, pool.submit(request_vector, client, provider, texts[nid]))
                           for nid, digest in todo]
                # the cache has a single writer: this thread, in submission order
                for nid, digest, fut in futures:
                    requests += 1
                    try:
                        vec = fut.result()
                    except RuntimeError as exc:
                        log.warning("node %s: %s", nid, exc)
                        failed.append(nid)
                        continue
                    cache.append(nid, pid, digest, vec)
                    vectors[nid], provenance[nid] = vec, "remote"
        finally:
            if own:
                client.close()
        if failed:
            raise FetchError(failed)

    dims = {len(v) for v in vectors.values()}
    if len(dims) > 1 or (provider.dim is not None and dims and dims != {provider.dim}):
        raise SchemaError(f"inconsistent vector dimensions {sorted(dims)}")
    mat = np.asarray([vectors[nid] for nid in graph.node_ids], dtype=np.float64)
    return AuxVectorTable(graph.node_ids, mat.reshape(graph.n, -1),
                          [provenance[nid] for nid in graph.node_ids], pid, requests)


def stub_descriptions(labels, C: int, accuracy: float, dim: int = 32, seed: int = 0,
                      noise: float = 0.5, node_ids: Sequence[str] | None = None) -> AuxVectorTable:
    """Deterministic stand-in for a description provider.

    Each node gets a noisy copy of its true class centroid with probability
    ``accuracy`` and of a uniformly drawn wrong class otherwise.
    """
    if not 1.0 / C - 1e-12 <= accuracy <= 1.0:
        raise ValueError("accuracy must lie in [1/C, 1]")
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((C, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    honest = rng.random(n) < accuracy
    shift = rng.integers(1, C, size=n) if C > 1 else np.zeros(n, dtype=np.int64)
    source = np.where(honest, labels, (labels + shift) % C)
    vectors = centroids[source] + noise * rng.standard_normal((n, dim)) / np.sqrt(dim)
    ids = tuple(node_ids) if node_ids is not None else tuple(str(i) for i in range(n))
    return AuxVectorTable(ids, vectors, ["stub"] * n, f"stub:{accuracy:g}:{seed}")


def export_vectors(table: AuxVectorTable, path) -> None:
    with Path(path).open("w") as fh:
        for nid, vec in zip(table.node_ids, table.vectors):
            fh.write(json.dumps({"node_id": nid, "vector": vec.tolist()}) + "\n")


def import_vectors(path, graph: CitationGraph) -> AuxVectorTable:
    found: dict[str, list[float]] = {}
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                found[str(rec["node_id"])] = [float(v) for v in rec["vector"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(f"{path}:{line_no}: bad record ({exc})") from None
    missing = [nid for nid in graph.node_ids if nid not in found]
    if missing:
        raise SchemaError(f"{path}: no vector for {len(missing)} nodes, e.g. {missing[0]!r}")
    mat = np.asarray([found[nid] for nid in graph.node_ids], dtype=np.float64)
    return AuxVectorTable(graph.node_ids, mat, ["file"] * graph.n, f"file:{Path(path).name}")


def _fit_head(adj: NormalizedAdjacency, x, labels, masks: SplitMasks, params: ModelParams,
              config: TrainConfig, name: str) -> tuple[AuxFactorOutput, ModelParams]:
    dtype = np.dtype(config.dtype)
    x = prepare_input(x, dtype)
    adj_t = adj.astype(dtype)
    terms = [LossTerm(0, masks.train, labels[masks.train])]
    evaluate = None
    if len(masks.val):
        def evaluate(p):
            logits, _ = gcn_forward(p, adj_t, x, activation=config.activation)
            return float(np.mean(logits[masks.val].argmax(axis=1) == labels[masks.val]))
    result = fit(params, adj_t, [x], terms, config, evaluate)
    logits, _ = gcn_forward(result.params, adj_t, x, activation=config.activation)
    return AuxFactorOutput.from_probs(softmax(logits.astype(np.float64)), name), result.params


def train_desc_head(aux: AuxVectorTable, labels, masks: SplitMasks, config: TrainConfig,
                    C: int | None = None) -> AuxFactorOutput:
    """One-hidden-layer classifier on the description vectors alone."""
    labels = np.asarray(labels)
    C = C or int(labels.max()) + 1
    params = init_params([aux.dim, config.hidden, C], seed=config.seed, dtype=np.dtype(config.dtype))
    out, _ = _fit_head(identity_adjacency(len(labels)), aux.vectors, labels, masks, params,
                       config, "desc")
    return out


def combined_init(d: int, aux_dim: int, hidden: int, C: int, seed: int, dtype) -> ModelParams:
    """Plain-GCN initialization with zero rows appended for the description columns."""
    params = init_params([d, hidden, C], seed=seed, dtype=dtype)
    params.weights[0] = np.vstack([params.weights[0], np.zeros((aux_dim, hidden), dtype=dtype)])
    return params


def train_combined_gcn(graph: CitationGraph, adj: NormalizedAdjacency, aux: AuxVectorTable,
                       masks: SplitMasks, config: TrainConfig,
                       features: np.ndarray | None = None) -> AuxFactorOutput:
    """GCN over ``[x_i || d_i]`` features."""
    x = graph.features if features is None else features
    joined = np.hstack([np.asarray(x, dtype=np.float64), aux.vectors])
    params = combined_init(x.shape[1], aux.dim, config.hidden, graph.c, config.seed,
                           np.dtype(config.dtype))
    out, _ = _fit_head(adj, joined, graph.labels, masks, params, config, "combined")
    return out


def accountability_score(s: float, pseudo_class: int, aux_out: Sequence[tuple[int, float]],
                         lambda_acc: float) -> float:
    """``s + lambda * sum(a_k for auxiliary factors whose class matches)``."""
    return s + lambda_acc * sum(a for cls, a in aux_out if int(cls) == int(pseudo_class))


def rescore(su, aux: Sequence[AuxFactorOutput], lambda_acc: float):
    """Accountability rescoring of a consistent set; nodes and classes are untouched."""
    bonus = np.zeros(len(su))
    for out in aux:
        agree = out.classes[su.nodes] == su.classes
        bonus += np.where(agree, out.confidence[su.nodes], 0.0)
    return su.with_adjusted(su.scores + lambda_acc * bonus)
