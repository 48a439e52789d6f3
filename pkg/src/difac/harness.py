"""Experiment configuration, per-seed runs, sweeps and reports."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from filelock import FileLock

from . import __version__
from .auxiliary import (ProviderConfig, fetch_descriptions, import_vectors, stub_descriptions,
                        train_combined_gcn, train_desc_head)
from .errors import ConfigError
from .factors import DiffMethod, build_factor_inputs, factor_hidden, factor_predict, train_factors
from .graph import (CitationGraph, load_named_dataset, make_synthetic_graph, mask_features,
                    normalize_adjacency, row_normalize, standard_split)
from .metrics import MetricsRecord, accuracy, conceit_detail, config_digest
from .nn import TrainConfig
from .pseudo import LoopConfig, difac_loop, intersection_baseline, self_training_baseline

log = logging.getLogger(__name__)

METHODS = ("gcn", "self_train", "intersection", "difac")
DIFF_ALIASES = {"marker": "marker", "reverse": "random_reverse", "random_reverse": "random_reverse",
                "exchange": "random_exchange", "random_exchange": "random_exchange"}
SWEEP_KEYS = {
    "label_rate": "split.per_class",
    "factor_count": "k",
    "mask": "mask_ratio",
    "tau": "loop.tau0",
    "rank_strategy": "loop.rank",
    "diff_method": "diff_method",
}
INDEX_FIELDS = ["run_id", "dataset", "method", "seed", "config_digest", "status", "test_acc",
                "pseudo_acc", "conceit", "path"]


@dataclass
class SplitConfig:
    per_class: int = 20
    n_val: int = 500
    n_test: int = 1000


@dataclass
class ExperimentConfig:
    dataset: str = "cora"
    data_dir: str = "data"
    method: str = "difac"
    k: int = 3
    diff_method: str = "marker"
    perturb_frac: float = 0.05
    label_mode: str = "block"
    aux: str = "none"  # none | file:PATH | stub:ACC | remote
    aux_texts: str | None = None  # JSON-lines {node_id, text} for remote descriptions
    mask_ratio: float = 0.0
    row_normalize: bool = True
    conceit_threshold: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "runs"
    split: SplitConfig = field(default_factory=SplitConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    loop: dict = field(default_factory=dict)  # LoopConfig overrides
    provider: dict = field(default_factory=dict)  # ProviderConfig overrides

    def __post_init__(self):
        if isinstance(self.split, dict):
            self.split = SplitConfig(**self.split)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(doc))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        """Identity of the experiment, independent of seeds and output location."""
        doc = self.to_dict()
        doc.pop("seeds")
        doc.pop("out")
        return config_digest(doc)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def loop_config(self) -> LoopConfig:
        return LoopConfig(**self.loop)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.diff_method not in DIFF_ALIASES:
            raise ConfigError(f"unknown construction method {self.diff_method!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if not self.dataset.startswith("synthetic"):
            for ext in ("content", "cites"):
                p = Path(self.data_dir) / f"{self.dataset}.{ext}"
                if not p.exists():
                    raise ConfigError(f"dataset file not found: {p}")
        if self.aux.startswith("file:") and not Path(self.aux[5:]).exists():
            raise ConfigError(f"aux vector file not found: {self.aux[5:]}")
        if self.aux == "remote" and not self.aux_texts:
            raise ConfigError("remote descriptions need aux_texts")
        try:
            self.train_config(0)
            self.loop_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def set_path(doc: dict, path: str, value: Any) -> None:
    """Assign ``value`` at a dotted key path inside a config dict."""
    parts = path.replace("-", "_").split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@lru_cache(maxsize=8)
def _load_graph(data_dir: str, name: str) -> CitationGraph:
    if name.startswith("synthetic"):
        seed = int(name.split(":")[1]) if ":" in name else 0
        return make_synthetic_graph(n=2000, c=6, d=1500, avg_degree=4.0, homophily=0.75,
                                    words_per_node=15, topic_strength=0.25, seed=seed, name=name)
    return load_named_dataset(data_dir, name)


@dataclass
class PreparedData:
    graph: CitationGraph
    features: np.ndarray
    adj: Any
    masks: Any


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    graph = _load_graph(config.data_dir, config.dataset)
    if config.mask_ratio:
        graph = mask_features(graph, config.mask_ratio, seed=seed)
    x = row_normalize(graph.features) if config.row_normalize else graph.features
    masks = standard_split(graph, config.split.per_class, config.split.n_val,
                           config.split.n_test, seed=seed)
    return PreparedData(graph, x, normalize_adjacency(graph), masks)


def build_aux(config: ExperimentConfig, data: PreparedData, seed: int):
    if config.aux == "none":
        return None
    graph = data.graph
    if config.aux.startswith("stub:"):
        table = stub_descriptions(graph.labels, graph.c, float(config.aux[5:]), seed=seed + 101,
                                  node_ids=graph.node_ids)
    elif config.aux.startswith("file:"):
        table = import_vectors(config.aux[5:], graph)
    elif config.aux == "remote":
        texts = read_texts(config.aux_texts)
        table = fetch_descriptions(ProviderConfig.from_env(**config.provider), graph, texts)
    else:
        raise ConfigError(f"unknown aux source {config.aux!r}")
    tc = config.train_config(seed)
    desc = train_desc_head(table, graph.labels, data.masks, tc, graph.c)
    comb = train_combined_gcn(graph, data.adj, table, data.masks, tc, features=data.features)
    return [desc, comb]


def read_texts(path) -> dict[str, str]:
    texts = {}
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                texts[str(rec["node_id"])] = rec["text"]
    return texts


def run_single(config: ExperimentConfig, seed: int) -> MetricsRecord:
    """Execute one (config, seed) pair and return its metrics."""
    data = prepare_data(config, seed)
    graph, masks = data.graph, data.masks
    tc, lc = config.train_config(seed), config.loop_config()
    digest = config.digest()
    record = MetricsRecord(run_id=f"{digest}-s{seed}", dataset=config.dataset,
                           method=config.method, seed=seed, config_digest=digest)
    plain = build_factor_inputs(data.features, 1, DiffMethod("none"))
    if config.method == "gcn":
        factorized = plain
        model, _ = train_factors(graph, data.adj, factorized, masks, tc)
        report = None
    elif config.method in ("self_train", "intersection"):
        factorized = plain
        runner = self_training_baseline if config.method == "self_train" else intersection_baseline
        model, report = runner(graph, data.adj, factorized, masks, tc, lc)
    else:
        method = DiffMethod(DIFF_ALIASES[config.diff_method], config.perturb_frac, seed=seed)
        factorized = build_factor_inputs(data.features, config.k, method, graph.c)
        aux = build_aux(config, data, seed)
        model, report = difac_loop(graph, data.adj, factorized, masks, tc, lc, aux)

    preds = factor_predict(model, data.adj, factorized)
    k_out = min(lc.output_factor, model.K - 1)
    probs = preds.probs[:, k_out, :]
    predicted = probs.argmax(axis=1)
    record.test_acc = accuracy(predicted, graph.labels, masks.test)
    record.val_acc = accuracy(predicted, graph.labels, masks.val)
    z = factor_hidden(model, data.adj, factorized, k_out)
    try:
        c = conceit_detail(z, predicted, graph.labels, masks.test, probs.max(axis=1),
                           config.conceit_threshold)
        record.conceit, record.conceit_sum = c.mean, c.total
    except Exception as exc:  # metric undefined for this run; keep the accuracy numbers
        record.extra["conceit_error"] = str(exc)
    if report is not None:
        record.trace = [asdict(r) for r in report.rows]
        final = [r.pseudo_acc for r in report.rows if r.pseudo_acc is not None]
        record.pseudo_acc = final[-1] if final else None
        record.extra["best_iteration"] = report.best_iteration
    return record


@dataclass
class RunManifest:
    config_digest: str
    code_version: str
    config: dict
    created: float
    updated: float
    records: dict[str, str] = field(default_factory=dict)  # seed -> record path
    failures: dict[str, str] = field(default_factory=dict)  # seed -> error message

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def load_records(self) -> list[MetricsRecord]:
        return [MetricsRecord.from_json(Path(p).read_text()) for _, p in sorted(
            self.records.items(), key=lambda kv: int(kv[0]))]


def _append_index(out: Path, record: MetricsRecord, path: Path) -> None:
    index = out / "index.csv"
    with FileLock(str(index) + ".lock"):
        new = not index.exists()
        with index.open("a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=INDEX_FIELDS)
            if new:
                w.writeheader()
            row = {k: getattr(record, k, "") for k in INDEX_FIELDS if k != "path"}
            row["path"] = str(path)
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def _run_seed(config: ExperimentConfig, seed: int):
    """Worker body: returns ``(record, error_message)``; never raises."""
    try:
        return run_single(config, seed), None
    except Exception as exc:
        log.error("seed %s failed: %s", seed, exc)
        record = MetricsRecord(run_id=f"{config.digest()}-s{seed}", dataset=config.dataset,
                               method=config.method, seed=seed, config_digest=config.digest(),
                               status="failed", error=traceback.format_exc(limit=3))
        return record, f"{type(exc).__name__}: {exc}"


def run(config: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """Run every seed; completed (digest, seed) pairs are skipped on rerun.

    Up to ``jobs`` seeds execute in separate processes; all file writes
    happen in the calling process.
    """
    config.validate()
    out = Path(config.out)
    digest = config.digest()
    run_dir = out / digest
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
    else:
        doc = config.to_dict()
        doc.pop("out")
        now = time.time()
        manifest = RunManifest(digest, __version__, doc, now, now)
    pending = [s for s in config.seeds
               if not (str(s) in manifest.records and (run_dir / f"seed_{s}.json").exists())]
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(pending))) as pool:
            results = list(pool.map(_run_seed, [config] * len(pending), pending))
    else:
        results = [_run_seed(config, s) for s in pending]
    for seed, (record, error) in zip(pending, results):
        key = str(seed)
        rec_path = run_dir / f"seed_{seed}.json"
        if error is None:
            rec_path.write_text(record.to_json())
            manifest.records[key] = str(rec_path)
            manifest.failures.pop(key, None)
        else:
            manifest.failures[key] = error
        _append_index(out, record, rec_path)
    if pending:
        manifest.updated = time.time()
        manifest_path.write_text(manifest.to_json())
    return manifest


def sweep(kind: str, base: ExperimentConfig, values: Sequence, methods: Sequence[str] | None = None,
          path=None, jobs: int = 1) -> str:
    """Run ``values x seeds`` (per method) and return one tidy CSV."""
    if kind not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    key = SWEEP_KEYS[kind]
    rows = []
    for method in methods or [base.method]:
        for value in values:
            doc = base.to_dict()
            doc["method"] = method
            set_path(doc, key, value)
            cfg = ExperimentConfig.from_dict(doc)
            manifest = run(cfg, jobs)
            for rec in manifest.load_records():
                rows.append({"kind": kind, "value": value, "method": method, "seed": rec.seed,
                             "test_acc": rec.test_acc, "val_acc": rec.val_acc,
                             "pseudo_acc": rec.pseudo_acc, "conceit": rec.conceit})
            for seed, err in manifest.failures.items():
                rows.append({"kind": kind, "value": value, "method": method, "seed": int(seed),
                             "test_acc": None, "val_acc": None, "pseudo_acc": None,
                             "conceit": None})
    rows.sort(key=lambda r: (r["method"], str(r["value"]), r["seed"]))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["kind", "value", "method", "seed", "test_acc", "val_acc",
                                        "pseudo_acc", "conceit"])
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt(values: list[float]) -> str:
    if not values:
        return "n/a"
    arr = np.asarray(values) * 100
    return f"{arr.mean():.2f} ± {arr.std():.2f}"


def report(manifests: Iterable[RunManifest]) -> str:
    """Per-method mean ± std over seeds, with deltas against the GCN baseline."""
    groups: dict[tuple[str, str], dict] = {}
    for m in manifests:
        method = m.config.get("method", "?")
        if m.config.get("aux", "none") != "none":
            method = f"{method}+{m.config['aux']}"
        key = (m.config.get("dataset", "?"), method)
        g = groups.setdefault(key, {"acc": [], "pseudo": [], "conceit": [], "failed": []})
        for rec in m.load_records():
            g["acc"].append(rec.test_acc)
            if rec.pseudo_acc is not None:
                g["pseudo"].append(rec.pseudo_acc)
            if rec.conceit is not None:
                g["conceit"].append(rec.conceit)
        g["failed"].extend(f"seed {s}: {e}" for s, e in sorted(m.failures.items()))
    lines = [f"{'dataset':<12} {'method':<14} {'test acc (%)':<18} {'vs gcn':<10} "
             f"{'pseudo acc (%)':<18} conceit"]
    for (dataset, method), g in sorted(groups.items()):
        base = groups.get((dataset, "gcn"))
        delta = ""
        if base and base["acc"] and g["acc"] and method != "gcn":
            diff = (np.mean(g["acc"]) - np.mean(base["acc"])) * 100
            delta = f"{abs(diff):.2f}{'↑' if diff >= 0 else '↓'}"
        conceit = (f"{np.mean(g['conceit']):.3f} ± {np.std(g['conceit']):.3f}"
                   if g["conceit"] else "n/a")
        lines.append(f"{dataset:<12} {method:<14} {_fmt(g['acc']):<18} {delta:<10} "
                     f"{_fmt(g['pseudo']):<18} {conceit}")
        for f in g["failed"]:
            lines.append(f"    FAILED {f}")
    return "\n".join(lines)


def find_manifests(out_dir) -> list[RunManifest]:
    return [RunManifest.load(p) for p in sorted(Path(out_dir).glob("*/manifest.json"))]
