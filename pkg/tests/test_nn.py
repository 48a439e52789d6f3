import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from difac.errors import NumericError, SchemaError, TrainingError
from difac.graph import CitationGraph, NormalizedAdjacency, identity_adjacency, normalize_adjacency
from difac.nn import (AdamState, LossTerm, ModelParams, TrainConfig, adam_step, backward, fit,
                      gcn_forward, gradient_check, init_params, load_params, log_softmax,
                      prepare_input, save_params, softmax, softmax_cross_entropy, spmm)

from conftest import path_graph


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return CitationGraph(rng.random((n, 5)), rng.integers(0, 3, n), edges,
                         tuple(map(str, range(n))), ("a", "b", "c"))


# sparse products


def test_spmm_identity_and_hand_case():
    m = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(spmm(identity_adjacency(4), m), m)
    half = normalize_adjacency(path_graph(2))
    np.testing.assert_allclose(spmm(half, np.array([[1.0], [3.0]])), [[2.0], [2.0]], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_spmm_matches_dense_product(seed):
    rng = np.random.default_rng(seed)
    a = sp.random(10, 10, density=0.3, random_state=seed, format="csr")
    b = rng.standard_normal((10, 4))
    np.testing.assert_allclose(spmm(a, b), a.toarray() @ b, atol=1e-12)


def test_spmm_dimension_mismatch():
    with pytest.raises(SchemaError):
        spmm(identity_adjacency(3), np.zeros((4, 1)))


# forward


def test_zero_weights_give_zero_logits():
    g = random_graph(6, 0.4, 0)
    p = init_params([5, 4, 3], seed=0, dtype=np.float64)
    zeros = p.zeros_like()
    logits, _ = gcn_forward(zeros, normalize_adjacency(g), g.features)
    assert logits.shape == (6, 3)
    assert not logits.any()


def test_two_node_hand_forward():
    adj = normalize_adjacency(path_graph(2))
    x = np.array([[1.0], [0.0]])
    ones = ModelParams([np.ones((1, 1)), np.ones((1, 1))], [None, None])
    logits, trace = gcn_forward(ones, adj, x)
    # layer 1: A x = [.5, .5] -> relu keeps it; layer 2: A h = [.5, .5]
    np.testing.assert_allclose(trace.acts[0], [[0.5], [0.5]])
    np.testing.assert_allclose(logits, [[0.5], [0.5]])


def test_forward_flags_non_finite_layer():
    adj = normalize_adjacency(path_graph(2))
    p = ModelParams([np.full((1, 1), np.inf), np.ones((1, 1))], [None, None])
    with pytest.raises(NumericError, match="layer 1"):
        gcn_forward(p, adj, np.array([[1.0], [1.0]]))


def test_forward_rejects_wrong_width():
    p = init_params([3, 2, 2])
    with pytest.raises(SchemaError):
        gcn_forward(p, identity_adjacency(2), np.zeros((2, 4), dtype=np.float32))


def test_dropout_off_at_inference_and_inverted_in_training():
    rng = np.random.default_rng(0)
    adj = identity_adjacency(4000)
    x = np.ones((4000, 1))
    p = ModelParams([np.ones((1, 1)), np.ones((1, 1))], [None, None])
    det, _ = gcn_forward(p, adj, x)
    np.testing.assert_array_equal(det, np.ones((4000, 1)))
    noisy, _ = gcn_forward(p, adj, x, dropout=0.5, rng=rng)
    assert set(np.unique(noisy)) <= {0.0, 2.0}
    assert abs(noisy.mean() - 1.0) < 0.05


# loss


def test_cross_entropy_reference_values():
    loss, _ = softmax_cross_entropy(np.zeros((3, 2)), np.array([0, 1, 0]), np.arange(3))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    big = np.array([[500.0, -500.0]])
    loss, _ = softmax_cross_entropy(big, np.array([0]), np.array([0]))
    assert loss < 1e-12


def test_cross_entropy_grad_rows_and_empty_mask():
    logits = np.random.default_rng(1).standard_normal((5, 3))
    _, g = softmax_cross_entropy(logits, np.array([0, 1, 2, 0, 1]), np.array([1, 3]))
    assert not g[[0, 2, 4]].any()
    with pytest.raises(ValueError):
        softmax_cross_entropy(logits, np.zeros(5, dtype=int), np.array([], dtype=int))


def test_cross_entropy_grad_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((6, 4))
    targets = rng.integers(0, 4, 6)
    mask = np.array([0, 2, 3, 5])
    _, g = softmax_cross_entropy(logits, targets, mask)
    eps = 1e-6
    worst = 0.0
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        num = (softmax_cross_entropy(up, targets, mask)[0]
               - softmax_cross_entropy(down, targets, mask)[0]) / (2 * eps)
        worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
    assert worst < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_softmax_rows_and_non_negative_loss(seed, scale):
    logits = np.random.default_rng(seed).standard_normal((7, 5)) * scale
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.exp(log_softmax(logits)), softmax(logits), atol=1e-12)
    loss, _ = softmax_cross_entropy(logits, np.zeros(7, dtype=int), np.arange(7))
    assert loss >= 0


# backward


def test_zero_upstream_gives_zero_gradients():
    g = random_graph(8, 0.3, 3)
    adj = normalize_adjacency(g)
    p = init_params([5, 4, 3], seed=1, dtype=np.float64)
    logits, trace = gcn_forward(p, adj, g.features)
    grads = backward(trace, adj, np.zeros_like(logits), p)
    assert all(not a.any() for a in grads.arrays())


def test_dead_relu_blocks_first_layer_gradient():
    g = random_graph(8, 0.3, 4)
    adj = normalize_adjacency(g)
    p = ModelParams([-np.ones((5, 4)), np.ones((4, 3))], [None, None])
    logits, trace = gcn_forward(p, adj, g.features)  # features > 0, so every unit is dead
    _, gl = softmax_cross_entropy(logits, g.labels, np.arange(8))
    grads = backward(trace, adj, gl, p)
    assert not grads.weights[0].any()


@pytest.mark.parametrize("seed", range(5))
def test_full_model_gradient_check(seed):
    g = random_graph(8, 0.35, seed)
    adj = normalize_adjacency(g)
    p = init_params([5, 4, 3], seed=seed, dtype=np.float64)
    err = gradient_check(p, adj, g.features, g.labels, n_samples=None, weight_decay=5e-4)
    assert err < 1e-4


def test_linear_activation_gradient_is_tighter():
    g = random_graph(8, 0.35, 11)
    p = init_params([5, 4, 3], seed=11, dtype=np.float64)
    err = gradient_check(p, normalize_adjacency(g), g.features, g.labels, n_samples=None,
                         activation="linear")
    assert err < 1e-7


def test_gradient_check_verdict_stable_across_eps():
    g = random_graph(8, 0.35, 12)
    p = init_params([5, 4, 3], seed=12, dtype=np.float64)
    adj = normalize_adjacency(g)
    a = gradient_check(p, adj, g.features, g.labels, eps=1e-5, n_samples=None)
    b = gradient_check(p, adj, g.features, g.labels, eps=1e-6, n_samples=None)
    assert (a < 1e-4) == (b < 1e-4)


def test_gradient_check_with_sparse_input():
    g = random_graph(8, 0.35, 13)
    x = sp.csr_matrix(np.where(g.features > 0.6, g.features, 0.0))
    p = init_params([5, 4, 3], seed=13, dtype=np.float64)
    assert gradient_check(p, normalize_adjacency(g), x, g.labels, n_samples=None) < 1e-4


# optimizer


def test_adam_first_step_is_signed_lr():
    rng = np.random.default_rng(0)
    p = init_params([3, 4, 2], seed=0, dtype=np.float64)
    grads = ModelParams([rng.standard_normal(w.shape) for w in p.weights],
                        [rng.standard_normal(b.shape) for b in p.biases])
    new, state = adam_step(p, grads, AdamState.for_params(p), lr=0.01, eps=0.0)
    for old, upd, g in zip(p.arrays(), new.arrays(), grads.arrays()):
        np.testing.assert_allclose(upd - old, -0.01 * np.sign(g), atol=1e-15)
    assert state.t == 1


def test_adam_zero_gradient_is_a_no_op():
    p = init_params([3, 4, 2], seed=0, dtype=np.float64)
    new, _ = adam_step(p, p.zeros_like(), AdamState.for_params(p), lr=0.01)
    for a, b in zip(p.arrays(), new.arrays()):
        np.testing.assert_array_equal(a, b)


def test_adam_state_mismatch():
    p = init_params([3, 4, 2])
    other = init_params([3, 4, 5, 2])
    with pytest.raises(SchemaError):
        adam_step(p, p.zeros_like(), AdamState.for_params(other), lr=0.1)


# training


def _toy_fit(seed=0):
    g = random_graph(12, 0.3, 7)
    adj = normalize_adjacency(g).astype(np.float32)
    x = prepare_input(g.features)
    p = init_params([5, 8, 3], seed=seed)
    cfg = TrainConfig(epochs=30, seed=seed, hidden=8)
    return fit(p, adj, [x], [LossTerm(0, np.arange(12), g.labels)], cfg)


def test_training_is_bit_deterministic():
    a, b = _toy_fit(), _toy_fit()
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        np.testing.assert_array_equal(x, y)
    assert a.losses == b.losses
    assert a.losses[-1] < a.losses[0]


def test_non_finite_loss_raises_training_error():
    g = random_graph(6, 0.4, 0)
    adj = normalize_adjacency(g).astype(np.float32)
    x = prepare_input(g.features)
    with np.errstate(invalid="ignore"), pytest.raises(TrainingError, match="epoch 1"):
        fit(init_params([5, 4, 3]), adj, [x], [LossTerm(0, np.arange(6), g.labels, np.inf)],
            TrainConfig(epochs=3))


def test_overflowing_forward_raises_numeric_error():
    g = random_graph(6, 0.4, 0)
    adj = normalize_adjacency(g).astype(np.float32)
    p = init_params([5, 4, 3])
    p.weights[0][:] = np.float32(3e38)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError):
            fit(p, adj, [prepare_input(g.features * 1e3)],
                [LossTerm(0, np.arange(6), g.labels)], TrainConfig(epochs=3))


def test_early_stopping_returns_best_scored_params():
    g = random_graph(12, 0.3, 8)
    adj = normalize_adjacency(g).astype(np.float32)
    x = prepare_input(g.features)
    scores = iter([0.1, 0.9, 0.2, 0.3, 0.4, 0.5] + [0.0] * 100)
    seen = []

    def evaluate(params):
        seen.append(params.copy())
        return next(scores)

    res = fit(init_params([5, 8, 3]), adj, [x], [LossTerm(0, np.arange(12), g.labels)],
              TrainConfig(epochs=50, patience=4, hidden=8), evaluate)
    assert res.best_epoch == 2 and res.best_score == 0.9
    assert len(seen) == 6
    for a, b in zip(res.params.arrays(), seen[1].arrays()):
        np.testing.assert_array_equal(a, b)


def test_train_config_validation():
    for bad in ({"lr": 0}, {"epochs": 0}, {"dropout": 1.0}, {"activation": "gelu"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_checkpoint_round_trip(tmp_path):
    p = init_params([4, 3, 2], seed=5)
    save_params(p, tmp_path / "ckpt.json")
    back = load_params(tmp_path / "ckpt.json")
    for a, b in zip(p.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)
        assert a.dtype == b.dtype
