import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ads import tensor as T
from ads.tensor import Tensor

from conftest import central_diff, rel_err


def grad_of(build, *arrays):
    """Analytic gradients of scalar ``build(*tensors)`` w.r.t. each array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*ts))
    return [t.grad for t in ts]


def fd_check(build, *arrays, tol=1e-6):
    analytic = grad_of(build, *arrays)
    for arr, g in zip(arrays, analytic):
        num = central_diff(lambda: float(build(*[Tensor(a) for a in arrays]).data), arr)
        assert rel_err(g, num) < tol


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_hand():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_fd(f64):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    fd_check(lambda x, y: T.tsum(T.matmul(x, y)), a, b, tol=1e-6)


def test_batched_matmul_grad_fd(f64):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = rng.normal(size=(2, 3, 5))
    fd_check(lambda x, y: T.tsum(T.mul(T.matmul(x, y), w)), a, b)


# -- softmax --------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-7)


def test_softmax_ln2(f64):
    np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-12)


def test_softmax_random_sums_and_grad(f64):
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    assert abs(T.softmax(Tensor(x)).data.sum() - 1) < 1e-9
    w = rng.normal(size=6)
    fd_check(lambda t: T.tsum(T.mul(T.softmax(t), w)), x)


def test_softmax_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_slices_sum_to_one(values):
    with T.precision("float32"):
        assert abs(T.softmax(Tensor(values)).data.sum() - 1) < 1e-6
    with T.precision("float64"):
        out = T.softmax(Tensor(values)).data
        assert abs(out.sum() - 1) < 1e-12
        assert np.all((out > 0) & (out <= 1))


# -- activations / layernorm ---------------------------------------------

def test_relu():
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0, 2]


def test_gelu_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0


def test_layernorm_constant_row_is_zero():
    out = T.layernorm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


@pytest.mark.parametrize("op", ["relu", "gelu", "layernorm", "l2_normalize", "exp"])
def test_unary_grads_fd(f64, op):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    if op == "layernorm":
        gain, bias = rng.normal(size=5), rng.normal(size=5)
        fd_check(lambda t, g, b: T.tsum(T.mul(T.layernorm(t, g, b), w)), x, gain, bias)
    else:
        fn = getattr(T, op)
        fd_check(lambda t: T.tsum(T.mul(fn(t), w)), x)


def test_shape_ops_grad_fd(f64):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    y = rng.normal(size=(2, 1, 4))
    w = rng.normal(size=(2, 4, 4))

    def build(a, b):
        c = T.concat([a, b], axis=1)
        c = T.transpose(c, (0, 2, 1))
        c = T.reshape(c, (2, 4, 4))
        return T.tsum(T.mul(c, w)) + T.tsum(T.mul(a[:, -1, :], a[:, 0, :]))

    fd_check(build, x, y)


def test_embedding_grad_accumulates_repeated_ids(f64):
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    T.backward(T.tsum(T.embedding(table, np.array([[1, 1, 3]]))))
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1])


def test_embedding_out_of_range():
    with pytest.raises(ValueError):
        T.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


# -- cross entropy ---------------------------------------------------------

def test_ce_uniform_logits():
    assert abs(float(T.cross_entropy_logits(Tensor([[0.0, 0.0]]), [0]).data) - math.log(2)) < 1e-6


def test_ce_large_margin():
    assert float(T.cross_entropy_logits(Tensor([[50.0, -50.0]]), [0]).data) < 1e-12


def test_ce_matches_logsumexp_oracle(f64):
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 2)) * 3
    labels = np.array([0, 1, 1, 0])
    brute = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    assert abs(float(T.cross_entropy_logits(Tensor(logits), labels).data) - brute) < 1e-9
    fd_check(lambda t: T.cross_entropy_logits(t, labels), logits)


def test_ce_bad_label():
    with pytest.raises(ValueError):
        T.cross_entropy_logits(Tensor([[0.0, 0.0]]), [2])


# -- backward / sgd ---------------------------------------------------------

def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    assert x.grad.tolist() == [6.0]


def test_backward_accumulates_reuse():
    w = Tensor([2.0], requires_grad=True)
    a, b = Tensor([3.0]), Tensor([5.0])
    T.backward(T.tsum(T.mul(w, a) + T.mul(w, b)))
    assert w.grad.tolist() == [8.0]


def test_backward_nonscalar_is_usage_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.UsageError):
        T.backward(T.mul(x, 2.0))


def test_frozen_tensor_never_gets_grad():
    x = Tensor([1.0], requires_grad=True)
    c = Tensor([4.0])
    T.backward(T.tsum(T.mul(x, c)))
    assert c.grad is None


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    before = a.data.copy()
    out = T.layernorm(T.gelu(a), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    T.backward(T.tsum(T.softmax(out)))
    np.testing.assert_array_equal(a.data, before)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4)))
        h = T.matmul(x, w)
        T.backward(T.tsum(T.mul(T.gelu(h), T.softmax(h))))
        return w.grad
    assert run().tobytes() == run().tobytes()


def test_sgd_step_arithmetic():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0], dtype=p.dtype)
    T.sgd_step(T.SGD([p], 0.1))
    assert abs(p.data[0] - 0.8) < 1e-7
    assert p.grad is None


def test_sgd_lr_zero_identity():
    p = Tensor([1.5, -2.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0], dtype=p.dtype)
    T.SGD([p], 0.0).step()
    assert p.data.tolist() == [1.5, -2.0]


def test_sgd_missing_grad():
    with pytest.raises(T.UsageError):
        T.SGD([Tensor([1.0], requires_grad=True)], 0.1).step()


def test_sgd_reduces_quadratic():
    p = Tensor([3.0, -1.0], requires_grad=True)

    def loss():
        return T.tsum(T.mul(p, p))

    before = float(loss().data)
    T.backward(loss())
    T.SGD([p], 0.1).step()
    assert float(loss().data) < before


def test_precision_switch():
    with T.precision("float64"):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32


def test_rng_streams_split_by_label():
    a = T.make_rng(3, "x").random(4)
    assert np.array_equal(a, T.make_rng(3, "x").random(4))
    assert not np.array_equal(a, T.make_rng(3, "y").random(4))
