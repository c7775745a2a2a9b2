from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uprlhf import numerics as nx

import gradcases


@pytest.mark.parametrize("name", gradcases.NAMES)
def test_every_op_matches_finite_differences(name):
    _, err = gradcases.run_case(gradcases.NAMES.index(name))
    assert err < 1e-5


def test_add_and_mul_values():
    a = nx.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nx.tensor([10.0, 20.0])
    np.testing.assert_array_equal((a + b).data, [[11, 22], [13, 24]])
    np.testing.assert_array_equal((a * 2.0).data, [[2, 4], [6, 8]])


def test_unsupported_broadcast_raises():
    with pytest.raises(nx.ShapeError):
        nx.add(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros((2, 1))))


def test_matmul_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.zeros(3), np.zeros((3, 2)))


def test_log_domain_error():
    with pytest.raises(nx.DomainError):
        nx.log(nx.tensor([1.0, 0.0]))


def test_embedding_out_of_range():
    with pytest.raises(nx.DomainError):
        nx.embedding(nx.parameter(np.zeros((4, 2))), np.array([0, 4]))


def test_backward_requires_scalar():
    x = nx.parameter(np.ones(3))
    with pytest.raises(nx.GraphError):
        nx.backward(nx.mul(x, 2.0))


def test_backward_twice_raises():
    x = nx.parameter(np.ones(3))
    loss = nx.sum(nx.square(x))
    nx.backward(loss)
    with pytest.raises(nx.GraphError):
        nx.backward(loss)


def test_reusing_consumed_intermediate_raises():
    x = nx.parameter(np.ones(3))
    h = nx.square(x)
    nx.backward(nx.sum(h))
    with pytest.raises(nx.GraphError):
        nx.sum(h)


def test_loss_without_grad_raises():
    with pytest.raises(nx.GraphError):
        nx.backward(nx.sum(nx.tensor(np.ones(3))))


def test_leaf_gradients_accumulate():
    x = nx.parameter(np.array([1.0, -2.0]))
    nx.backward(nx.sum(nx.square(x)))
    nx.backward(nx.sum(nx.square(x)))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shared_subexpression_gradient():
    # d/dx of (x*x + x*x) uses the same node twice
    x = nx.parameter(np.array([3.0]))
    y = nx.mul(x, x)
    nx.backward(nx.sum(nx.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def test_no_grad_builds_no_graph():
    x = nx.parameter(np.ones(2))
    with nx.no_grad():
        y = nx.mul(x, 3.0)
    assert not y.requires_grad
    assert nx.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []
    with nx.no_grad():
        t = threading.Thread(target=lambda: seen.append(nx.grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


def test_deep_chain_does_not_recurse():
    x = nx.parameter(np.array([1.0]))
    y = x
    for _ in range(5000):
        y = nx.scale(y, 1.0)
    nx.backward(nx.sum(y))
    np.testing.assert_allclose(x.grad, [1.0])


def test_sigmoid_extremes_are_finite():
    out = nx.sigmoid(nx.tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])
    ls = nx.log_sigmoid(nx.tensor([-1000.0, 1000.0])).data
    np.testing.assert_allclose(ls, [-1000.0, 0.0])


def test_softmax_logprobs_rejects_non_finite():
    with pytest.raises(nx.NumericError):
        nx.softmax_logprobs(nx.tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_log_softmax_normalises(x):
    lp = nx.log_softmax(nx.tensor(x)).data
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-10, 10)))
def test_layer_norm_output_is_standardised(x):
    if np.ptp(x, axis=-1).min() < 1e-3:
        return
    out = nx.layer_norm(nx.tensor(x), nx.tensor(np.ones(6)), nx.tensor(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)


# -- Adam ---------------------------------------------------------------


def _adam_reference(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain loop transcription of bias-corrected Adam."""
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(7)]
    p = nx.parameter(x0.copy())
    state = nx.AdamState(lr=0.01)
    for g in grads:
        nx.adam_step([p], [g], state)
    np.testing.assert_allclose(p.data, _adam_reference(x0, grads, 0.01), rtol=0, atol=1e-14)


def test_adam_first_step_moves_by_lr():
    p = nx.parameter(np.array([1.0, -1.0]))
    nx.adam_step([p], [np.array([5.0, -0.1])], nx.AdamState(lr=0.1))
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adam_minimises_quadratic():
    p = nx.parameter(np.array([3.0, -2.0]))
    opt = nx.Adam([p], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        nx.backward(nx.sum(nx.square(nx.sub(p, np.array([1.0, 1.0])))))
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-3)


def test_adam_rejects_missing_gradient():
    with pytest.raises(nx.GraphError):
        nx.adam_step([nx.parameter(np.zeros(2))], [None], nx.AdamState())


# -- RNG ------------------------------------------------------------------


def test_make_rng_is_reproducible_and_path_isolated():
    a = nx.make_rng(3, "rl", "sample", 0).random(4)
    b = nx.make_rng(3, "rl", "sample", 0).random(4)
    c = nx.make_rng(3, "rl", "sample", 1).random(4)
    d = nx.make_rng(4, "rl", "sample", 0).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_make_rng_uses_philox():
    assert isinstance(nx.make_rng(0).bit_generator, np.random.Philox)


def test_long_path_names_stay_distinct():
    a = nx.make_rng(0, "ensemble_member_aaaa").random()
    b = nx.make_rng(0, "ensemble_member_bbbb").random()
    assert a != b
