import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusion_transformer import tensor as T
from fusion_transformer.errors import ConfigError, ContractError, DimensionError
from fusion_transformer.tensor import GradTape, Tensor

from helpers import check_grads, numeric_grad, rel_err, tape_grads

RNG = np.random.default_rng(1234)


def p(*shape, low=-1.0, high=1.0):
    return T.parameter(RNG.uniform(low, high, size=shape))


# -- construction ----------------------------------------------------------------

def test_tensor_is_float64_and_immutable():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64 and t.shape == (2, 2) and t.size == 4
    with pytest.raises(ValueError):
        t.data[0, 0] = 9.0


def test_reshape_returns_new_tensor():
    t = Tensor(np.arange(6.0))
    r = t.reshape(2, 3)
    assert r is not t and t.shape == (6,) and r.shape == (2, 3)


def test_grad_matches_data_length():
    w = T.parameter([1.0, 2.0, 3.0])
    (w * w).sum().backward()
    assert w.grad.shape == w.shape


# -- matmul -----------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(np.eye(2), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_gradient_finite_difference():
    a, b = p(3, 4), p(4, 2)
    c = RNG.normal(size=(3, 2))
    err, _ = check_grads(lambda: (T.matmul(a, b) * c).sum(), [("a", a), ("b", b)])
    assert err < 1e-6


def test_batched_matmul_broadcast_gradient():
    a, b = p(2, 3, 4), p(4, 5)
    err, _ = check_grads(lambda: T.tsum(T.sin(T.matmul(a, b))), [("a", a), ("b", b)])
    assert err < 1e-6


# -- softmax ----------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_jacobian_finite_difference():
    x = p(5)
    for i in range(5):
        err, _ = check_grads(lambda: T.softmax(x)[i], [("x", x)])
        assert err < 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


# -- layer norm -------------------------------------------------------------------

def test_layer_norm_constant_row_gives_zeros():
    out = T.layer_norm(Tensor(np.full((2, 5), 3.7)), np.ones(5), np.zeros(5))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_symmetric_pair():
    out = T.layer_norm(Tensor([1.0, 3.0]), np.ones(2), np.zeros(2), epsilon=0.0)
    np.testing.assert_allclose(out.data, [-1.0, 1.0])


def test_layer_norm_standardises_last_axis():
    out = T.layer_norm(Tensor(RNG.normal(3, 5, size=(2, 4, 8))), np.ones(8), np.zeros(8), epsilon=0.0).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-9)


def test_layer_norm_gradient():
    x, g, b = p(2, 3, 6), p(6), p(6)
    c = RNG.normal(size=(2, 3, 6))
    err, name = check_grads(lambda: T.tsum(T.layer_norm(x, g, b) * c), [("x", x), ("g", g), ("b", b)])
    assert err < 1e-6, name


# -- activations ------------------------------------------------------------------

def test_relu_values():
    assert T.relu(Tensor(-2.0)).item() == 0.0 and T.relu(Tensor(3.0)).item() == 3.0


def test_gelu_zero():
    assert T.gelu(Tensor(0.0)).item() == 0.0


def test_linear_is_identity():
    x = Tensor([-1.0, 2.0])
    np.testing.assert_array_equal(T.linear(x).data, x.data)


def test_sin_value_and_derivative():
    x = T.parameter(math.pi / 2)
    y = T.sin(x)
    y.backward()
    assert abs(y.item() - 1.0) < 1e-15 and abs(x.grad) < 1e-9


def test_unknown_activation():
    with pytest.raises(ConfigError):
        T.get_activation("swish")


@pytest.mark.parametrize("fn", [T.relu, T.gelu, T.linear, T.sin, T.cos, T.tanh, T.exp])
def test_activation_gradients(fn):
    x = T.parameter(RNG.uniform(0.1, 1.5, size=7) * RNG.choice([-1, 1], size=7))
    err, _ = check_grads(lambda: T.tsum(fn(x) * np.arange(1, 8)), [("x", x)])
    assert err < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcasting_binary_gradients(op):
    a, b = p(2, 3, 4), p(3, 1, low=0.5, high=2.0)
    fn = getattr(T, op)
    err, name = check_grads(lambda: T.tsum(fn(a, b) * np.arange(24).reshape(2, 3, 4)), [("a", a), ("b", b)])
    assert err < 1e-6, name


@pytest.mark.parametrize("name,fn", [
    ("power", lambda x: T.power(x, 3.0)),
    ("log", T.log),
    ("sqrt", T.sqrt),
    ("abs", T.tabs),
    ("mean", lambda x: T.mean(x, axis=0)),
    ("sum_keepdims", lambda x: T.tsum(x, axis=1, keepdims=True)),
    ("reshape", lambda x: T.reshape(x, (6,))),
    ("transpose", lambda x: T.transpose(x)),
    ("swapaxes", lambda x: T.swapaxes(x, 0, 1)),
    ("getitem", lambda x: x[1, ::2]),
    ("concat", lambda x: T.concat([x, x * 2.0], axis=0)),
    ("pick", lambda x: T.pick(x, np.array([2, 0]))),
])
def test_unary_op_gradients(name, fn):
    x = p(2, 3, low=0.5, high=2.0)
    w = None

    def loss():
        out = fn(x)
        nonlocal w
        if w is None:
            w = RNG.normal(size=out.shape)
        return T.tsum(out * w)

    err, _ = check_grads(loss, [("x", x)])
    assert err < 1e-6, name


def test_log_clamp_keeps_finite():
    assert np.isfinite(T.log(Tensor([0.0]), clamp=1e-12).data).all()


# -- dropout ----------------------------------------------------------------------

def test_dropout_zero_is_identity():
    x = Tensor(RNG.normal(size=10))
    rng = np.random.default_rng(0)
    for training in (True, False):
        np.testing.assert_array_equal(T.dropout(x, 0.0, training, rng).data, x.data)


def test_dropout_eval_is_identity():
    x = Tensor(RNG.normal(size=10))
    np.testing.assert_array_equal(T.dropout(x, 0.3, False).data, x.data)


def test_dropout_statistics():
    out = T.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
    kept = out != 0
    assert abs(kept.mean() - 0.5) < 0.01
    np.testing.assert_allclose(out[kept], 2.0)


def test_dropout_contracts():
    with pytest.raises(ConfigError):
        T.dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))
    with pytest.raises(ContractError):
        T.dropout(Tensor([1.0]), 0.5, True, None)


# -- backward and tape ----------------------------------------------------------------

def test_backward_sum():
    w = T.parameter(np.zeros(3))
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    w = T.parameter([1.0, 2.0, 3.0])
    T.backward(T.tsum(w * w))
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_backward_requires_scalar():
    w = T.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        T.backward(w * 2.0)


def test_shared_input_accumulates():
    w = T.parameter(2.0)
    T.backward(w * w + w * 3.0)
    assert w.grad == pytest.approx(7.0)


def test_recorded_tape_is_topological_and_matches_graph_tape():
    a, b = p(3), p(3)
    with GradTape() as tape:
        c = a * b
        d = T.sin(c) + a
        loss = T.tsum(d * d)
    outputs = [n.output for n in tape.nodes]
    for i, node in enumerate(tape.nodes):
        for inp in node.inputs:
            if inp._node is not None:
                assert outputs.index(inp) < i
    T.backward(loss, tape)
    g_tape = [a.grad.copy(), b.grad.copy()]
    a.grad = b.grad = None
    T.backward(loss)
    np.testing.assert_allclose(g_tape, [a.grad, b.grad], rtol=0, atol=0)


def test_deep_graph_does_not_recurse():
    x = T.parameter(1.0)
    y = x
    for _ in range(5000):
        y = y * 1.0
    T.backward(y)
    assert x.grad == 1.0


def test_grad_helpers_agree_on_composite():
    x = p(4)
    f = lambda: T.tsum(T.tanh(x) * T.exp(x * 0.5))
    assert rel_err(tape_grads(f, [x])[0], numeric_grad(f, x)) < 1e-7
