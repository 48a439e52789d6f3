import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from difac.errors import MetricError
from difac.factors import DiffMethod, build_factor_inputs
from difac.metrics import (MetricsRecord, accuracy, conceit, conceit_detail, config_digest,
                           pseudo_accuracy)
from difac.nn import TrainConfig
from difac.pseudo import LoopConfig, PseudoLabelSet, difac_selector, run_pseudo_loop


def test_accuracy_examples():
    y = np.arange(10) % 3
    assert accuracy(y, y) == 1.0
    assert accuracy((y + 1) % 3, y) == 0.0
    half = y.copy()
    half[:5] = (half[:5] + 1) % 3
    assert accuracy(half, y) == 0.5
    assert accuracy(half, y, np.arange(5, 10)) == 1.0
    with pytest.raises(MetricError):
        accuracy(y, y, np.array([], dtype=int))


def test_pseudo_accuracy():
    labels = np.array([0, 1, 2, 0])
    ok = PseudoLabelSet([0, 2], [0, 2], [1, 1], [1, 1], "selected")
    assert pseudo_accuracy(ok, labels) == 1.0
    mixed = PseudoLabelSet([0, 1], [0, 2], [1, 1], [1, 1], "selected")
    assert pseudo_accuracy(mixed, labels) == 0.5
    with pytest.raises(MetricError):
        pseudo_accuracy(PseudoLabelSet.empty(), labels)


def conceit_oracle(z, pred, y, mask):
    """Loop-only reimplementation with mean centroids."""
    right = [i for i in mask if pred[i] == y[i]]
    wrong = [i for i in mask if pred[i] != y[i]]
    if not wrong:
        return 0.0

    def cos(a, b):
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    def centroid(c):
        return np.mean([z[i] for i in right if y[i] == c], axis=0)

    return float(np.mean([cos(z[i], centroid(pred[i])) - cos(z[i], centroid(y[i]))
                          for i in wrong]))


def random_case(seed, n=60, C=3, h=5):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(C), n // C)
    z = np.abs(rng.standard_normal((n, h))) + np.eye(C, h)[y] * 2
    pred = y.copy()
    flip = rng.choice(n, n // 6, replace=False)
    pred[flip] = (y[flip] + rng.integers(1, C, len(flip))) % C
    return z, pred, y


@pytest.mark.parametrize("seed", range(5))
def test_conceit_matches_loop_oracle(seed):
    z, pred, y = random_case(seed)
    mask = np.arange(len(y))
    res = conceit_detail(z, pred, y, mask)
    assert res.mean == pytest.approx(conceit_oracle(z, pred, y, mask), abs=1e-12)
    assert res.total == pytest.approx(res.mean * res.count)
    assert res.count == int(np.sum(pred != y))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_conceit_scale_invariance(seed, scale):
    z, pred, y = random_case(seed)
    mask = np.arange(len(y))
    assert conceit(z * scale, pred, y, mask) == pytest.approx(conceit(z, pred, y, mask), abs=1e-10)


def test_conceit_trivial_cases():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = np.array([0, 1, 0])
    assert conceit(z, y, y, np.arange(3)) == 0.0
    # node 2 is equidistant from both class centroids
    assert conceit(z, np.array([0, 1, 1]), y, np.arange(3)) == pytest.approx(0.0, abs=1e-15)


def test_conceit_sign_follows_predicted_class_pull():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [0.1, 1.0]])
    y = np.array([0, 1, 0])
    pred = np.array([0, 1, 1])  # node 2 sits next to class 1, where it was (wrongly) put
    assert conceit(z, pred, y, np.arange(3)) > 0


def test_conceit_missing_centroid_names_class():
    z = np.eye(4)
    with pytest.raises(MetricError, match="class 2"):
        conceit(z, np.array([0, 1, 0, 1]), np.array([0, 1, 2, 1]), np.arange(4))


def test_conceit_threshold_filters_nodes():
    z, pred, y = random_case(0)
    conf = np.linspace(0.3, 1.0, len(y))
    full = conceit_detail(z, pred, y, np.arange(len(y)))
    some = conceit_detail(z, pred, y, np.arange(len(y)), conf, threshold=0.9)
    assert some.count == int(np.sum((pred != y) & (conf > 0.9)))
    assert some.count < full.count


def test_pseudo_accuracy_agrees_with_loop_trace(small_setup):
    g, x, adj, masks = small_setup
    f = build_factor_inputs(x, 3, DiffMethod("marker"), g.c)
    cfg = LoopConfig(iters=3)
    inner = difac_selector(cfg)
    captured = []

    def spy(preds, candidates, tau):
        su, sp_set = inner(preds, candidates, tau)
        captured.append(sp_set)
        return su, sp_set

    _, report = run_pseudo_loop(g, adj, f, masks, TrainConfig(epochs=40, patience=None), cfg, spy)
    for row, sp_set in zip(report.rows[1:], captured):
        assert row.pseudo_acc == pseudo_accuracy(sp_set, g.labels)


def test_config_digest_ignores_key_order():
    a = {"x": 1, "nested": {"b": 2, "a": [1, 2]}}
    b = {"nested": {"a": [1, 2], "b": 2}, "x": 1}
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest({**a, "x": 2})


def test_metrics_record_round_trip_and_validation():
    rec = MetricsRecord("r", "cora", "difac", 0, "abc", test_acc=0.8, conceit=0.1,
                        trace=[{"iteration": 0}])
    assert MetricsRecord.from_json(rec.to_json()) == rec
    assert json.loads(rec.to_json())["method"] == "difac"
    with pytest.raises(ValueError):
        MetricsRecord("r", "cora", "gcn", 0, "abc", test_acc=1.5)
    with pytest.raises(ValueError):
        MetricsRecord("r", "cora", "gcn", 0, "abc", conceit=3.0)
