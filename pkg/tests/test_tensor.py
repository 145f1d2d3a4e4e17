import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scalemixer import tensor as T
from scalemixer.tensor import ContractError, DimensionError, GeometryError, Tensor


def naive_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i][j] += a[i][t] * b[t][j]
    return out


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------- construction


def test_rejects_nonfinite_values():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, float("nan")])
    with pytest.raises(FloatingPointError):
        Tensor([float("inf")])


def test_allow_nonfinite_escape_hatch():
    with T.allow_nonfinite():
        t = Tensor([float("nan")])
    assert math.isnan(t.data[0])
    with pytest.raises(FloatingPointError):
        Tensor([float("nan")])


def test_tensor_is_immutable_copy():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_empty_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


# ------------------------------------------------------------------- matmul


def test_matmul_identity():
    b = [[5.0, 6.0], [7.0, 8.0]]
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_small_example_against_triple_loop():
    a, b = [[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]
    assert naive_matmul(a, b) == [[3.0], [7.0]]
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_zero():
    out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.arange(12.0).reshape(3, 4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_matmul_matches_triple_loop(m, k, n, data):
    a = data.draw(arrays(np.float64, (m, k), elements=finite))
    b = data.draw(arrays(np.float64, (k, n), elements=finite))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a.tolist(), b.tolist()),
                               rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------------ softmax


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_last_axis(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(T.softmax_last_axis(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75],
                               atol=1e-15)
    big = T.softmax_last_axis(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = T.softmax_last_axis(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_last_axis(Tensor(x + c)).data, y, atol=1e-12)


# --------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), one, zero).data, 0.0)
    b = np.array([1.0, -2.0, 0.5, 4.0])
    out = T.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), zero, Tensor(b)).data
    np.testing.assert_array_equal(out, np.broadcast_to(b, (3, 4)))
    # mean 0, variance 1 already: only the eps guard separates the result from the input
    row = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-300).data
    np.testing.assert_allclose(row, [[1.0, -1.0]], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
def test_layer_norm_matches_formula(x):
    d = x.shape[1]
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + T.LAYER_NORM_EPS)
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    np.testing.assert_allclose(out, ref, atol=1e-9)


# ------------------------------------------------------------ patch geometry


def test_patchify_identity_kernel_p1():
    field = np.arange(24.0).reshape(2, 4, 3)
    kernel = np.eye(3).reshape(1, 1, 3, 3)
    out = T.conv2d_patchify(Tensor(field), Tensor(kernel), Tensor(np.zeros(3)), 1).data
    np.testing.assert_array_equal(out, field.reshape(8, 3))


def test_patchify_constant_field_sum():
    P, C, w = 3, 2, 0.25
    out = T.conv2d_patchify(Tensor(np.ones((6, 9, C))), Tensor(np.full((P, P, C, 5), w)),
                            Tensor(np.zeros(5)), P).data
    np.testing.assert_allclose(out, P * P * C * w)
    assert out.shape == (2 * 3, 5)


def test_patchify_token_count_and_order():
    out = T.conv2d_patchify(Tensor(np.zeros((32, 64, 8))), Tensor(np.zeros((4, 4, 8, 2))),
                            Tensor(np.zeros(2)), 4)
    assert out.shape == (128, 2)
    # token t is patch (t // 16, t % 16): mark one patch and find it
    field = np.zeros((32, 64, 1))
    field[8:12, 20:24] = 1.0
    tok = T.conv2d_patchify(Tensor(field), Tensor(np.ones((4, 4, 1, 1))), Tensor(np.zeros(1)), 4).data
    assert np.flatnonzero(tok[:, 0]).tolist() == [2 * 16 + 5]


def test_patchify_geometry_error():
    with pytest.raises(GeometryError):
        T.conv2d_patchify(Tensor(np.zeros((5, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))), Tensor(np.zeros(1)), 2)


def test_unpatchify_inverts_patchify_geometry(rng):
    P, C = 2, 3
    field = rng.normal(size=(4, 6, C))
    eye = np.eye(P * P * C)
    tokens = T.conv2d_patchify(Tensor(field), Tensor(eye.reshape(P, P, C, P * P * C)),
                               Tensor(np.zeros(P * P * C)), P)
    back = T.deconv2d_unpatchify(tokens, Tensor(eye.reshape(P * P * C, P, P, C)), P, C, (2, 3))
    assert back.shape == field.shape
    np.testing.assert_array_equal(back.data, field)


def test_unpatchify_locality_and_zero():
    P, C, d = 2, 1, 3
    tokens = np.zeros((6, d))
    tokens[4, 0] = 1.0
    out = T.deconv2d_unpatchify(Tensor(tokens), Tensor(np.ones((d, P, P, C))), P, C, (2, 3)).data
    nz = np.argwhere(out[..., 0] != 0)
    assert set(map(tuple, nz)) == {(2, 2), (2, 3), (3, 2), (3, 3)}
    zero = T.deconv2d_unpatchify(Tensor(np.zeros((6, d))), Tensor(np.ones((d, P, P, C))), P, C, (2, 3))
    np.testing.assert_array_equal(zero.data, 0.0)
    with pytest.raises(GeometryError):
        T.deconv2d_unpatchify(Tensor(np.zeros((5, d))), Tensor(np.ones((d, P, P, C))), P, C, (2, 3))


def test_depthwise_conv_matches_loop(rng):
    x = rng.normal(size=(3, 4, 2))
    k = rng.normal(size=(3, 3, 2))
    b = rng.normal(size=2)
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    ref = np.zeros_like(x)
    for i in range(3):
        for j in range(4):
            ref[i, j] = (pad[i:i + 3, j:j + 3] * k).sum(axis=(0, 1)) + b
    np.testing.assert_allclose(T.depthwise_conv3x3(Tensor(x), Tensor(k), Tensor(b)).data, ref, atol=1e-12)


# ------------------------------------------------------------------ bilinear


def test_bilinear_examples():
    field = np.arange(12.0).reshape(3, 4, 1)
    at_node = T.bilinear_sample(Tensor(field), Tensor([[2.0, 1.0]])).data
    assert at_node[0, 0] == field[2, 1, 0]
    col = np.array([[[3.0]], [[7.0]]])
    assert T.bilinear_sample(Tensor(col), Tensor([[0.5, 0.0]])).data[0, 0] == 5.0
    corners = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    assert T.bilinear_sample(Tensor(corners), Tensor([[0.5, 0.5]])).data[0, 0] == 1.5


def test_bilinear_clamps_out_of_range():
    field = np.arange(6.0).reshape(2, 3, 1)
    out = T.bilinear_sample(Tensor(field), Tensor([[-3.0, 9.0], [5.0, -1.0]])).data[:, 0]
    np.testing.assert_array_equal(out, [field[0, 2, 0], field[1, 0, 0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.data())
def test_bilinear_exact_at_nodes_and_linear_along_axis(h, w, data):
    field = data.draw(arrays(np.float64, (h, w, 2), elements=finite))
    i = data.draw(st.integers(0, h - 1))
    j = data.draw(st.integers(0, w - 2))
    t = data.draw(st.floats(0, 1))
    node = T.bilinear_sample(Tensor(field), Tensor([[float(i), float(j)]])).data[0]
    np.testing.assert_array_equal(node, field[i, j])
    mid = T.bilinear_sample(Tensor(field), Tensor([[float(i), j + t]])).data[0]
    np.testing.assert_allclose(mid, (1 - t) * field[i, j] + t * field[i, j + 1], atol=1e-10)


# ------------------------------------------------------------------ backward


def test_backward_examples():
    x = Tensor(np.arange(4.0), requires_grad=True)
    np.testing.assert_array_equal(T.backward(T.sum_(x)).of(x), np.ones(4))
    y = Tensor([3.0], requires_grad=True)
    assert T.backward(T.sum_(T.mul(y, y))).of(y)[0] == 6.0
    unused = Tensor([1.0], requires_grad=True)
    g = T.backward(T.sum_(y))
    assert g.of(unused) is None
    np.testing.assert_array_equal(g.of_or_zeros(unused), [0.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_accumulates_shared_parents():
    x = Tensor([2.0], requires_grad=True)
    loss = T.sum_(T.mul(x, x) + T.mul(x, 3.0))
    assert T.backward(loss).of(x)[0] == 7.0  # 2x + 3


def test_backward_is_deterministic(rng):
    a = rng.normal(size=(3, 4))

    def run():
        x = Tensor(a, requires_grad=True)
        return T.backward(T.sum_(T.softmax_last_axis(T.matmul(x, Tensor(a.T))))).of(x)

    np.testing.assert_array_equal(run(), run())


# -------------------------------------------------------------- finite diff


def test_finite_diff_examples():
    g = T.finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-8
    np.testing.assert_array_equal(T.finite_diff_grad(lambda x: 4.0, np.ones(3)), np.zeros(3))
    for eps in (1e-2, 1e-4, 1e-6):
        assert T.finite_diff_grad(lambda x: 2.5 * float(x[0]), np.array([1.0]), eps)[0] == pytest.approx(2.5, abs=1e-9)


def test_finite_diff_rejects_nonpositive_eps():
    with pytest.raises(ContractError):
        T.finite_diff_grad(lambda x: 0.0, np.ones(1), 0.0)
