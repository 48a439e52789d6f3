import numpy as np
import pytest

from difac.graph import CitationGraph, make_synthetic_graph, normalize_adjacency, row_normalize, standard_split


@pytest.fixture
def tiny_files(tmp_path):
    """Three nodes, two binary features, two classes, one citation."""
    content = tmp_path / "tiny.content"
    cites = tmp_path / "tiny.cites"
    content.write_text("a 1 0 red\nb 0 1 blue\nc 1 1 red\n")
    cites.write_text("a b\n")
    return content, cites


@pytest.fixture(scope="session")
def small_graph():
    return make_synthetic_graph(n=300, c=3, d=120, avg_degree=4.0, homophily=0.85,
                                words_per_node=10, topic_strength=0.5, seed=3)


@pytest.fixture(scope="session")
def small_setup(small_graph):
    g = small_graph
    x = row_normalize(g.features)
    masks = standard_split(g, per_class=5, n_val=60, n_test=120, seed=0)
    return g, x, normalize_adjacency(g), masks


def path_graph(n: int) -> CitationGraph:
    edges = np.array([[i, i + 1] for i in range(n - 1)], dtype=np.int64).reshape(-1, 2)
    return CitationGraph(features=np.eye(n), labels=np.arange(n) % 2, edges=edges,
                         node_ids=tuple(str(i) for i in range(n)), label_names=("a", "b"))
