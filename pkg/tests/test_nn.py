import numpy as np
import pytest

from mqpipe import (SamplerParams, accuracy, adam_step, batch_loss,
                    build_minibatch, forward, full_forward, init_model,
                    loss_and_grads, sgd_step)
from mqpipe.nn import backward

from oracles import (dense_gcn_forward, dense_sage_forward,
                     numerical_gradients, softmax_ce_sum)


def _full_batch(g, arch):
    """A minibatch whose blocks reproduce the exact dense propagation."""
    params = SamplerParams(method=arch, fanout=g.num_nodes)
    rng = np.random.default_rng(0)
    return build_minibatch(g, np.arange(g.num_nodes), params, rng)


@pytest.mark.parametrize("arch", ["gcn", "sage"])
def test_forward_matches_dense_on_full_fanout(g8, arch):
    state = init_model(g8.feature_dim, 5, g8.num_classes, arch=arch,
                       seed=3, dtype=np.float64)
    batch = _full_batch(g8, arch)
    got = forward(batch, state)
    # blocks index into batch-local ids; map back to graph order
    order = np.argsort(batch.target_ids)
    dense = (dense_gcn_forward if arch == "gcn" else dense_sage_forward)(g8, state)
    assert np.allclose(got[order], dense[np.sort(batch.target_ids)], atol=1e-9)


@pytest.mark.parametrize("arch", ["gcn", "sage"])
def test_full_forward_matches_dense(g8, arch):
    state = init_model(g8.feature_dim, 5, g8.num_classes, arch=arch,
                       seed=3, dtype=np.float64)
    got = full_forward(g8, state)
    dense = (dense_gcn_forward if arch == "gcn" else dense_sage_forward)(g8, state)
    assert np.allclose(got, dense, atol=1e-9)


def test_batch_loss_matches_reference(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, size=6)
    loss, dlogits = batch_loss(logits, labels)
    assert loss == pytest.approx(softmax_ce_sum(logits, labels), rel=1e-10)
    assert dlogits.shape == logits.shape


def test_batch_loss_gradient_numerical(rng):
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, size=5)
    _, dlogits = batch_loss(logits, labels)
    h = 1e-6
    for i in range(5):
        for j in range(3):
            up, dn = logits.copy(), logits.copy()
            up[i, j] += h
            dn[i, j] -= h
            num = (softmax_ce_sum(up, labels) - softmax_ce_sum(dn, labels)) / (2 * h)
            assert dlogits[i, j] == pytest.approx(num, abs=1e-6)


@pytest.mark.parametrize("arch", ["gcn", "sage"])
@pytest.mark.parametrize("method_fanout", [("gcn", 2), ("gcn", 100)])
def test_backward_matches_finite_differences(g8, arch, method_fanout):
    method, fanout = method_fanout
    params = SamplerParams(method=arch, fanout=fanout)
    batch = build_minibatch(g8, np.arange(g8.num_nodes), params,
                            np.random.default_rng(7))
    state = init_model(g8.feature_dim, 4, g8.num_classes, arch=arch,
                       seed=11, dtype=np.float64)
    _, grads, _ = loss_and_grads(batch, state)

    def f():
        logits = forward(batch, state)
        return softmax_ce_sum(logits, batch.target_labels)

    numeric = numerical_gradients(f, state.weights, h=1e-5)
    for got, ref in zip(grads, numeric):
        denom = max(np.abs(ref).max(), 1e-8)
        assert np.abs(got - ref).max() / denom < 1e-6


def test_adam_step_first_update_magnitude():
    state = init_model(3, 4, 2, seed=0, learning_rate=0.1, dtype=np.float64)
    before = [w.copy() for w in state.weights]
    grads = [np.ones_like(w) for w in state.weights]
    adam_step(state, grads)
    # bias-corrected first step moves every weight by ~lr against the sign
    for b, w in zip(before, state.weights):
        assert np.allclose(b - w, 0.1, atol=1e-6)
    assert state.step_count == 1


def test_adam_moments_update():
    state = init_model(2, 3, 2, seed=1, dtype=np.float64)
    grads = [np.full_like(w, 2.0) for w in state.weights]
    adam_step(state, grads)
    for m, v in zip(state.m, state.v):
        assert np.allclose(m, 0.2)        # (1-0.9)*2
        assert np.allclose(v, 0.004)      # (1-0.999)*4


def test_sgd_step():
    state = init_model(2, 3, 2, seed=1, learning_rate=0.5, dtype=np.float64)
    before = [w.copy() for w in state.weights]
    grads = [np.ones_like(w) for w in state.weights]
    sgd_step(state, grads)
    for b, w in zip(before, state.weights):
        assert np.allclose(b - w, 0.5)
    assert state.m is None or all(np.all(m == 0) for m in state.m)


def test_nonfinite_forward_raises(g8):
    state = init_model(g8.feature_dim, 4, g8.num_classes, seed=0)
    state.weights[0][:] = np.inf
    batch = _full_batch(g8, "gcn")
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        forward(batch, state)


def test_accuracy():
    logits = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1, 1, 1])
    assert accuracy(logits, labels) == pytest.approx(0.75)


def test_model_copy_is_deep():
    state = init_model(3, 4, 2, seed=0)
    other = state.copy()
    other.weights[0][0, 0] += 1.0
    assert state.weights[0][0, 0] != other.weights[0][0, 0]


def test_backward_same_graph_as_forward(g8):
    # gradient flows through both concat halves for sage
    params = SamplerParams(method="sage", fanout=3)
    batch = build_minibatch(g8, np.arange(g8.num_nodes), params,
                            np.random.default_rng(2))
    state = init_model(g8.feature_dim, 4, g8.num_classes, arch="sage",
                       seed=5, dtype=np.float64)
    logits, cache = forward(batch, state, return_cache=True)
    _, dlogits = batch_loss(logits, batch.target_labels)
    grads = backward(batch, state, cache, dlogits)
    assert all(np.any(gw != 0) for gw in grads)
