import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idiomadv import tensor as T
from idiomadv.errors import ContractError, NumericError, ShapeError, TapeStateError


def test_matmul_identity():
    out = T.matmul(np.eye(2), T.Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_ones_times_b_transpose(rng):
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 5))
    T.backward(T.sum(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.T, rtol=1e-14)
    # finite differences with h=1e-6
    rep = T.grad_check(lambda a_: T.sum(T.matmul(a_, b)), [a.data], h=1e-6, tol=1e-6)
    assert rep.passed, rep


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    big = T.softmax(T.Tensor([1000.0, 0.0])).data
    assert big[0] == 1.0 and 0.0 <= big[1] < 1e-300
    e = math.e
    np.testing.assert_allclose(T.softmax(T.Tensor([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)],
                               rtol=1e-15)
    np.testing.assert_allclose(T.softmax(T.Tensor([1.0, 0.0])).data, [0.7311, 0.2689], atol=5e-5)


def test_softmax_rejects_single_class_and_nonfinite():
    with pytest.raises(ShapeError):
        T.softmax(T.Tensor([[1.0], [2.0]]))
    with pytest.raises(NumericError):
        T.softmax(T.Tensor([np.inf, 0.0]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 7)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(T.Tensor(x), axis=-1).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(y >= 0) and np.all(y <= 1)


def test_layer_norm_examples():
    out = T.layer_norm(T.Tensor([3.0, 3.0, 3.0]), np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])
    out = T.layer_norm(T.Tensor([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-300)
    np.testing.assert_allclose(out.data, [1.0, -1.0], rtol=1e-15)


def test_layer_norm_moments(rng):
    out = T.layer_norm(T.Tensor(rng.normal(3.0, 5.0, size=(4, 32))), np.ones(32), np.zeros(32)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-5)


def test_layer_norm_empty_axis():
    with pytest.raises(ShapeError):
        T.layer_norm(T.Tensor(np.zeros((2, 0))), np.zeros(0), np.zeros(0))


def test_layer_norm_gradient(rng):
    w = rng.normal(size=(3, 6))
    rep = T.grad_check(lambda x, g, b: T.sum(T.layer_norm(x, g, b) * w),
                       [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)])
    assert rep.max_rel_err < 1e-5


def test_backward_linear_and_square():
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_softmax_cross_entropy_graph_gradient(rng):
    onehot = np.eye(3)[[0, 2, 1, 1]]
    rep = T.grad_check(lambda z: T.sum(T.log(T.softmax(z)) * onehot) * -0.25,
                       [rng.normal(size=(4, 3))], h=1e-5, tol=1e-4)
    assert rep.passed, rep


def test_fan_out_accumulates():
    x = T.Tensor([1.5], requires_grad=True)
    T.backward(T.sum(x + x))
    assert x.grad.tolist() == [2.0]


def test_non_scalar_loss_rejected():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2.0)


def test_tape_is_single_use():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(TapeStateError):
        T.backward(loss)


def test_backward_restricted_to_inputs(rng):
    w = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    d = T.Tensor(np.zeros((4, 3)), requires_grad=True)
    x = rng.normal(size=(4, 3))
    T.backward(T.sum(T.gelu(T.matmul(x + d, w))), inputs=[d])
    assert w.grad is None
    assert d.grad.shape == (4, 3)


def test_nonfinite_results_are_errors():
    with pytest.raises(NumericError):
        T.Tensor([np.nan])
    with pytest.raises(NumericError):
        T.log(T.Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        T.mul(T.Tensor([1e300]), T.Tensor([1e300]))


def test_grad_check_scalar_square():
    rep = T.grad_check(lambda x: T.sum(x * x), [np.array([3.0])])
    assert rep.passed and rep.max_rel_err < 1e-9


def test_grad_check_detects_wrong_rule():
    T.inject_fault("mul")
    try:
        rep = T.grad_check(lambda x: T.sum(x * x), [np.array([3.0])])
    finally:
        T.inject_fault(None)
    assert not rep.passed


PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "gelu": lambda a, b: T.gelu(a) * b,
    "softmax": lambda a, b: T.softmax(a, axis=0) * b,
    "log_sq": lambda a, b: T.log(a * a + 1.0) * b,
    "mean": lambda a, b: T.mean(a * b, axis=1, keepdims=True),
    "reshape": lambda a, b: T.reshape(a, (-1,)) * T.reshape(b, (-1,)),
}


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), name=st.sampled_from(sorted(PRIMITIVES)))
def test_primitive_gradients_randomised(seed, name):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    proj = r.normal(size=PRIMITIVES[name](T.Tensor(a), T.Tensor(b)).shape)
    fn = PRIMITIVES[name]
    rep = T.grad_check(lambda x, y: T.sum(fn(x, y) * proj), [a, b], h=1e-5, tol=1e-4)
    assert rep.passed, (name, rep)


def test_embedding_gradient_scatters_with_repeats(rng):
    w = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    T.backward(T.sum(T.embedding(w, np.array([1, 1, 4]))))
    np.testing.assert_array_equal(w.grad.sum(axis=1), [0, 6, 0, 0, 3])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(T.Tensor(np.zeros((3, 2))), np.array([3]))


def test_identical_inputs_give_bitwise_identical_outputs_and_grads(rng):
    x0, w0 = rng.normal(size=(5, 8)), rng.normal(size=(8, 8))

    def run():
        x, w = T.Tensor(x0, requires_grad=True), T.Tensor(w0, requires_grad=True)
        y = T.layer_norm(T.gelu(T.matmul(x, w)), np.ones(8), np.zeros(8))
        loss = T.sum(T.softmax(y) * x0)
        T.backward(loss)
        return loss.data.copy(), x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)
