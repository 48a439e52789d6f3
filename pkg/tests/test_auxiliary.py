import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difac.auxiliary import (AuxFactorOutput, ProviderConfig, VectorCache, accountability_score,
                             combined_init, export_vectors, fetch_descriptions, import_vectors,
                             rescore, stub_descriptions, text_hash, train_combined_gcn,
                             train_desc_head)
from difac.errors import CacheError, ContractError, FetchError, SchemaError
from difac.graph import CitationGraph, SplitMasks, normalize_adjacency
from difac.nn import TrainConfig, gcn_forward, init_params
from difac.pseudo import PseudoLabelSet

HEAD = TrainConfig(seed=0)


class EmbeddingServer:
    """Local stand-in for an embedding endpoint; counts requests and can fail on demand."""

    def __init__(self, fail_texts=(), style="embedding"):
        owner = self
        self.requests = 0
        self.auth = []
        self.fail_texts = set(fail_texts)

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                owner.requests += 1
                owner.auth.append(self.headers.get("Authorization"))
                if body["input"] in owner.fail_texts:
                    self.send_response(503)
                    self.end_headers()
                    return
                vec = [float(len(body["input"])), float(sum(map(ord, body["input"])) % 97), 1.0]
                doc = {"data": [{"embedding": vec}]} if style == "openai" else {style: vec}
                out = json.dumps(doc).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(out)))
                self.end_headers()
                self.wfile.write(out)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/embed"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def tiny_graph(n=6):
    return CitationGraph(np.eye(n), np.arange(n) % 2, np.zeros((0, 2), dtype=np.int64),
                         tuple(f"p{i}" for i in range(n)), ("a", "b"))


def texts_for(g):
    return {nid: f"title and abstract of {nid}" for nid in g.node_ids}


@pytest.mark.parametrize("style", ["embedding", "vector", "openai"])
def test_warm_cache_makes_no_requests(tmp_path, monkeypatch, style):
    monkeypatch.setenv("DIFAC_PROVIDER_TOKEN", "secret")
    g = tiny_graph()
    with EmbeddingServer(style=style) as server:
        cfg = ProviderConfig(endpoint=server.url, cache_path=str(tmp_path / "c.jsonl"), dim=3)
        first = fetch_descriptions(cfg, g, texts_for(g))
        assert server.requests == g.n and first.requests == g.n
        assert set(first.provenance) == {"remote"}
        assert server.auth[0] == "Bearer secret"
        second = fetch_descriptions(cfg, g, texts_for(g))
        assert server.requests == g.n and second.requests == 0
        assert set(second.provenance) == {"cache"}
        np.testing.assert_array_equal(first.vectors, second.vectors)
        assert first.vectors.shape == (g.n, 3)


def test_changed_text_misses_cache(tmp_path):
    g = tiny_graph()
    texts = texts_for(g)
    with EmbeddingServer() as server:
        cfg = ProviderConfig(endpoint=server.url, cache_path=str(tmp_path / "c.jsonl"))
        fetch_descriptions(cfg, g, texts)
        texts["p2"] = "revised abstract"
        fetch_descriptions(cfg, g, texts)
        assert server.requests == g.n + 1
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert len(lines) == g.n + 1  # append-only
    rec = json.loads(lines[-1])
    assert rec["node_id"] == "p2" and rec["text_hash"] == text_hash("revised abstract")


def test_missing_text_names_the_node(tmp_path):
    g = tiny_graph()
    texts = texts_for(g)
    del texts["p4"]
    with pytest.raises(ContractError, match="p4"):
        fetch_descriptions(ProviderConfig(endpoint="http://unused", cache_path=str(tmp_path / "c")),
                           g, texts)


def test_failures_after_retries_list_missing_nodes(tmp_path):
    g = tiny_graph()
    texts = texts_for(g)
    with EmbeddingServer(fail_texts={texts["p1"], texts["p3"]}) as server:
        cfg = ProviderConfig(endpoint=server.url, cache_path=str(tmp_path / "c.jsonl"),
                             retries=2, backoff=0.0)
        with pytest.raises(FetchError) as exc:
            fetch_descriptions(cfg, g, texts)
        assert sorted(exc.value.missing) == ["p1", "p3"]
        assert server.requests == 4 + 2 * 3
    # successful vectors were cached before the failure surfaced
    assert len(VectorCache(tmp_path / "c.jsonl")) == 4


def test_no_endpoint_and_cold_cache(tmp_path):
    g = tiny_graph()
    with pytest.raises(FetchError):
        fetch_descriptions(ProviderConfig(cache_path=str(tmp_path / "c.jsonl")), g, texts_for(g))


def test_corrupt_cache_is_reported(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"node_id": "a", "provider": "x", "text_hash": "h", "vector": [1]}\n{oops\n')
    with pytest.raises(CacheError, match=":2"):
        VectorCache(path)


def test_provider_config_from_env(monkeypatch):
    monkeypatch.setenv("DIFAC_PROVIDER_ENDPOINT", "http://example.invalid/v1")
    cfg = ProviderConfig.from_env(model="m")
    assert cfg.endpoint == "http://example.invalid/v1" and cfg.provider_id.endswith("|m")
    with pytest.raises(ValueError):
        ProviderConfig(timeout=0)


# stub provider and heads


def stub_task(accuracy, C=4, n=2000, seed=0):
    labels = np.random.default_rng(seed).integers(0, C, n)
    table = stub_descriptions(labels, C, accuracy, dim=32, seed=seed)
    idx = np.random.default_rng(seed + 1).permutation(n)
    train = np.sort(np.concatenate([idx[labels[idx] == c][:50] for c in range(C)]))
    rest = np.setdiff1d(idx, train)
    masks = SplitMasks(train, np.sort(rest[:200]), np.sort(rest[200:]), 50, seed)
    return labels, table, masks


def test_stub_is_deterministic():
    labels = np.arange(20) % 4
    a = stub_descriptions(labels, 4, 0.7, seed=3)
    b = stub_descriptions(labels, 4, 0.7, seed=3)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    with pytest.raises(ValueError):
        stub_descriptions(labels, 4, 0.1)


def test_perfect_stub_head_is_near_perfect():
    labels, table, masks = stub_task(1.0)
    out = train_desc_head(table, labels, masks, HEAD, 4)
    assert np.mean(out.classes[masks.test] == labels[masks.test]) >= 0.99
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out.confidence, out.probs.max(axis=1))


def test_uninformative_stub_head_is_at_chance():
    labels, table, masks = stub_task(0.25)
    out = train_desc_head(table, labels, masks, HEAD, 4)
    assert abs(np.mean(out.classes[masks.test] == labels[masks.test]) - 0.25) <= 0.05


def test_vector_file_round_trip(tmp_path):
    g = tiny_graph()
    table = stub_descriptions(g.labels, 2, 1.0, dim=5, node_ids=g.node_ids)
    export_vectors(table, tmp_path / "v.jsonl")
    back = import_vectors(tmp_path / "v.jsonl", g)
    np.testing.assert_array_equal(back.vectors, table.vectors)
    lines = (tmp_path / "v.jsonl").read_text().splitlines()
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:-1]))
    with pytest.raises(SchemaError):
        import_vectors(tmp_path / "short.jsonl", g)


def test_zero_description_columns_leave_first_forward_unchanged(small_setup):
    g, x, adj, _ = small_setup
    zeros = np.zeros((g.n, 7))
    joined = np.hstack([x, zeros])
    combo = combined_init(x.shape[1], 7, 16, g.c, seed=4, dtype=np.float64)
    plain = init_params([x.shape[1], 16, g.c], seed=4, dtype=np.float64)
    a, _ = gcn_forward(combo, adj, joined)
    b, _ = gcn_forward(plain, adj, x)
    np.testing.assert_array_equal(a, b)


def test_combined_gcn_outputs(small_setup):
    g, x, adj, masks = small_setup
    table = stub_descriptions(g.labels, g.c, 0.9, dim=8, seed=1, node_ids=g.node_ids)
    out = train_combined_gcn(g, adj, table, masks, TrainConfig(epochs=60, hidden=16), features=x)
    assert out.probs.shape == (g.n, g.c)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-6)


# accountability


def test_accountability_examples():
    assert accountability_score(0.6, 1, [(0, 0.9), (2, 0.8)], 0.5) == 0.6
    assert accountability_score(0.6, 1, [(1, 0.8), (1, 0.4)], 0.5) == pytest.approx(1.2)
    assert accountability_score(0.6, 1, [(1, 0.8), (1, 0.4)], 0.0) == 0.6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_rescore_only_reorders(seed, lam):
    rng = np.random.default_rng(seed)
    n, C = 30, 4
    nodes = np.sort(rng.choice(100, n, replace=False))
    s = rng.uniform(0.3, 1.0, n)
    su = PseudoLabelSet(nodes, rng.integers(0, C, n), s, s)
    aux = [AuxFactorOutput.from_probs(rng.dirichlet(np.ones(C), 100), f"a{i}") for i in range(2)]
    out = rescore(su, aux, lam)
    np.testing.assert_array_equal(out.nodes, su.nodes)
    np.testing.assert_array_equal(out.classes, su.classes)
    np.testing.assert_array_equal(out.scores, su.scores)
    assert np.all(out.adjusted >= su.scores)
    for i, (v, c) in enumerate(zip(nodes, su.classes)):
        expect = accountability_score(s[i], c, [(a.classes[v], a.confidence[v]) for a in aux], lam)
        assert out.adjusted[i] == pytest.approx(expect, abs=1e-12)
