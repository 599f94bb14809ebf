import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safcar import tensor as T
from safcar.errors import ContractError, DimensionError, NonFiniteError
from safcar.tensor import Graph, Tensor, backward, grad_check, precision


def matmul_oracle(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv1d_oracle(x, w, stride, pad):
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, t + 2 * pad))
    xp[:, pad : pad + t] = x
    t_out = (t + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for j in range(t_out):
            out[o, j] = sum(w[o, c, i] * xp[c, j * stride + i] for c in range(c_in) for i in range(k))
    return out


def conv2d_oracle(x, w, stride, pad):
    b, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    xp = np.zeros((b, h + 2 * pad, wd + 2 * pad, c_in))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, ho, wo, c_out))
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                patch = xp[n, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[n, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    return out


# --- construction -----------------------------------------------------------


def test_tensor_defaults_to_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32 and t.shape == (2, 2) and t.grad is None


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_precision_context_restores_dtype():
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


# --- matmul ----------------------------------------------------------------


def test_matmul_identity_and_zero():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.zeros((2, 2)))).data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul_oracle(a, b), [[19, 22], [43, 50]])
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_random_against_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    with precision(np.float64):
        out = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, matmul_oracle(a, b), atol=1e-12)


def test_matmul_records_only_with_grad():
    a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))
    with Graph() as g:
        T.matmul(a, b)
    assert len(g) == 0
    a.requires_grad = True
    with Graph() as g:
        T.matmul(a, b)
    assert len(g) == 1 and g.nodes[0].kind == "matmul"


# --- softmax ---------------------------------------------------------------


def test_softmax_rows_examples():
    out = T.softmax_rows(Tensor([[0.0, 0.0], [1000.0, 1000.0], [np.log(2.0), 0.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5], [2 / 3, 1 / 3]], atol=1e-6)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50))


@settings(max_examples=50, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(m, c):
    with precision(np.float64):
        p = T.softmax_rows(Tensor(m)).data
        q = T.softmax_rows(Tensor(m + c)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p, q, atol=1e-6)


# --- conv1d ----------------------------------------------------------------


def test_conv1d_identity_kernels():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    np.testing.assert_array_equal(T.conv1d(x, Tensor([[[1.0]]])).data, x.data)
    np.testing.assert_array_equal(T.conv1d(x, Tensor([[[0.0, 1.0, 0.0]]]), pad=1).data, x.data)


def test_conv1d_sliding_sum():
    out = T.conv1d(Tensor([[1.0, 2.0, 3.0, 4.0]]), Tensor([[[1.0, 1.0, 1.0]]]), pad=1)
    np.testing.assert_array_equal(out.data, [[3, 6, 9, 7]])
    np.testing.assert_array_equal(conv1d_oracle(np.array([[1.0, 2, 3, 4]]), np.ones((1, 1, 3)), 1, 1), [[3, 6, 9, 7]])


def test_conv1d_errors():
    with pytest.raises(DimensionError):
        T.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 5))))
    with pytest.raises(DimensionError):
        T.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))))


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(0, 999)
)
def test_conv1d_against_oracle(c_in, c_out, t, k, stride, seed):
    pad = (k - 1) // 2
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(c_in, t)), rng.normal(size=(c_out, c_in, k))
    with precision(np.float64):
        out = T.conv1d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv1d_oracle(x, w, stride, pad), atol=1e-10)
    if stride == 1:
        assert out.shape[-1] == t


# --- conv2d ----------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(4, 7), st.integers(1, 2), st.integers(0, 999))
def test_conv2d_against_oracle(b, c_in, c_out, size, stride, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(b, size, size + 1, c_in)), rng.normal(size=(3, 3, c_in, c_out))
    bias = rng.normal(size=c_out)
    with precision(np.float64):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, pad=1).data
    np.testing.assert_allclose(out, conv2d_oracle(x, w, stride, 1) + bias, atol=1e-10)


# --- layer norm --------------------------------------------------------------


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(Tensor(np.full(4, 3.0)), ones, zeros).data, 0.0, atol=1e-6)
    with precision(np.float64):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-9)
    b = np.array([0.5, -2.0, 3.0, 1.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), zeros, Tensor(b)).data
    np.testing.assert_allclose(out, np.broadcast_to(b, (3, 4)), atol=1e-6)


# --- backward ----------------------------------------------------------------


def test_backward_square_and_matmul_adjoint():
    with precision(np.float64):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Graph() as g:
            loss = T.sum_(T.mul(x, x))
        backward(g, loss)
        np.testing.assert_allclose(x.grad, 2 * x.data)

        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Graph() as g:
            loss = T.sum_(T.matmul(a, b))
        backward(g, loss)
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


def test_backward_unused_parameter_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([[5.0]], requires_grad=True)
    with Graph() as g:
        loss = T.sum_(x)
    grads = backward(g, loss, [x, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros((1, 1)))


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = T.mul(x, 2.0)
    with pytest.raises(ContractError):
        backward(g, y)


def test_graph_is_topologically_ordered():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Graph() as g:
        h = T.relu(T.matmul(x, w))
        loss = T.mean(T.softmax(h))
    produced = {x.id, w.id}
    for node in g.nodes:
        assert all(i in produced for i in node.input_ids)
        produced.add(node.output_id)
    assert g.nodes[-1].output_id == loss.id


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 999))
def test_reshape_round_trip_on_data_and_grad(shape, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        w = rng.normal(size=int(np.prod(shape)))
        with Graph() as g:
            y = T.reshape(T.flatten(x), x.shape)
            loss = T.sum_(T.mul(T.flatten(y), Tensor(w)))
        backward(g, loss)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(x.grad, w.reshape(shape))


def test_cross_entropy_value():
    logits = np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    with precision(np.float64):
        loss = T.cross_entropy(Tensor(logits), [0, 2]).item()
    p0 = np.exp(2) / np.exp([2, 1, 0]).sum()
    assert loss == pytest.approx((-np.log(p0) + np.log(3)) / 2, rel=1e-12)


def test_non_finite_reported_with_node_id():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonFiniteError) as info:
        with Graph(check_finite=True):
            y = T.relu(x)
            T.mul(y, np.inf)
    assert info.value.node_id == 1


# --- grad_check --------------------------------------------------------------


def test_grad_check_eps_range():
    with pytest.raises(ContractError):
        grad_check(lambda x: T.sum_(x), [np.ones(2)], eps=1e-2)


def test_grad_check_relu_piecewise_exact():
    x = np.array([[0.7, -1.3, 2.1], [-0.4, 0.9, -2.2]])
    assert grad_check(lambda t: T.sum_(T.relu(t)), [x]) < 1e-6


def test_grad_check_softmax_first_column():
    x = np.random.default_rng(3).normal(size=(2, 3))

    def f(t):
        p = T.softmax_rows(t)
        return T.sum_(T.mul(p, Tensor(np.array([1.0, 0.0, 0.0]))))

    assert grad_check(f, [x]) < 1e-4


def test_grad_check_detects_wrong_gradient():
    def bad_square(t):
        return T.custom_op("bad", (t,), t.data**2, lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(lambda t: T.sum_(bad_square(t)), [np.array([1.0, 2.0])]) > 0.1


ELEMENTWISE = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_grad_check_broadcasting_elementwise(name):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    w = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    assert grad_check(lambda x, y: T.sum_(T.mul(ELEMENTWISE[name](x, y), w)), [a, b]) < 1e-6


@pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
def test_grad_check_mean(axis):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 4))
    w = Tensor(rng.normal(size=np.mean(x, axis=axis).shape or (1,)), dtype=np.float64)
    assert grad_check(lambda t: T.sum_(T.mul(T.mean(t, axis=axis), w)), [x]) < 1e-6


def test_grad_check_concat_transpose_cross_entropy():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))

    def f(x, y):
        logits = T.transpose(T.transpose(T.concat([x, y], axis=1)))
        return T.cross_entropy(logits, [0, 4, 2, 1])

    assert grad_check(f, [a, b]) < 1e-6
