"""Tensor engine: op semantics against brute-force oracles, tape behavior."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskattn.errors import ConfigError, GraphError, OracleError, ShapeError, UsageError
from maskattn.tensor import (
    Parameter,
    Tensor,
    backward,
    concat,
    conv2d,
    finite_diff_check,
    layer_norm,
    matmul,
    no_grad,
    record,
    softmax,
    upsample_bilinear,
)


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, shape)


# -- matmul -----------------------------------------------------------------------


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity():
    b = rand((2, 5), seed=1)
    out = matmul(Tensor(np.eye(2)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_zero_left_zero_grad_to_right():
    a = Tensor(np.zeros((3, 4)))
    b = Tensor(rand((4, 2), seed=2), grad_enabled=True)
    with record():
        out = matmul(a, b)
        backward(out.sum())
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))
    np.testing.assert_array_equal(b.grad, np.zeros((4, 2)))


def test_matmul_known_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = matmul_oracle(a, b)
    np.testing.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_matmul_matches_oracle(m, k, n, seed):
    a, b = rand((m, k), seed), rand((k, n), seed + 1)
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-12)


def test_matmul_backward_formula():
    a = Tensor(rand((3, 4), 3), grad_enabled=True)
    b = Tensor(rand((4, 2), 4), grad_enabled=True)
    w = rand((3, 2), 5)
    with record():
        backward((matmul(a, b) * Tensor(w)).sum())
    np.testing.assert_allclose(a.grad, w @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ w, atol=1e-12)


# -- softmax ----------------------------------------------------------------------


def test_softmax_uniform_row():
    out = softmax(Tensor(np.full((2, 4), 3.7)), axis=1)
    np.testing.assert_allclose(out.data, np.full((2, 4), 0.25), atol=1e-15)


def test_softmax_shift_invariance():
    x = rand((3, 5), 7)
    a = softmax(Tensor(x), axis=1).data
    b = softmax(Tensor(x + 123.456), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_exact_two_entry():
    out = softmax(Tensor(np.array([[0.0, math.log(2.0)]])), axis=1)
    np.testing.assert_allclose(out.data, [[1.0 / 3.0, 2.0 / 3.0]], atol=1e-15)


@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one_and_positive(rows, cols, seed):
    out = softmax(Tensor(rand((rows, cols), seed, scale=5.0)), axis=1).data
    assert (out > 0).all()
    np.testing.assert_allclose(out.sum(axis=1), np.ones(rows), atol=1e-12)


def test_softmax_jacobian_matches_finite_differences():
    x = Tensor(rand((2, 4), 11), grad_enabled=True)
    w = Tensor(rand((2, 4), 12))

    def f():
        return (softmax(x, axis=1) * w).sum()

    assert finite_diff_check(f, [x]) < 1e-8


def test_softmax_axis_out_of_range():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((2, 2))), axis=2)


# -- conv2d -----------------------------------------------------------------------


def conv2d_oracle(x, w, bias, stride, padding):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * w[o, c, a, b]
                out[o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def test_conv2d_one_by_one_identity():
    x = rand((1, 4, 5), 13)
    w = np.ones((1, 1, 1, 1))
    out = conv2d(Tensor(x), Tensor(w))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_kernel_zero_output_and_grad():
    x = Tensor(rand((2, 4, 4), 14), grad_enabled=True)
    w = Tensor(np.zeros((3, 2, 3, 3)))
    with record():
        out = conv2d(x, w, padding=1)
        backward(out.sum())
    np.testing.assert_array_equal(out.data, np.zeros((3, 4, 4)))
    np.testing.assert_array_equal(x.grad, np.zeros((2, 4, 4)))


def test_conv2d_ones_blur_counts_neighbors():
    x = np.ones((1, 4, 4))
    w = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), padding=1).data[0]
    expected = conv2d_oracle(x, w, None, 1, 1)[0]
    np.testing.assert_array_equal(out, expected)
    assert expected[0, 0] == 4.0 and expected[0, 1] == 6.0 and expected[1, 1] == 9.0


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)


@given(
    st.integers(1, 3),
    st.integers(1, 2),
    st.integers(4, 7),
    st.integers(1, 2),
    st.integers(0, 2),
    st.integers(0, 10_000),
)
@settings(max_examples=30, deadline=None)
def test_conv2d_matches_loop_oracle(cin, cout, size, stride, padding, seed):
    kh = kw = 3
    if size + 2 * padding < kh:
        return
    x = rand((cin, size, size), seed)
    w = rand((cout, cin, kh, kw), seed + 1)
    b = rand((cout,), seed + 2)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv2d_oracle(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_gradients_via_finite_differences():
    x = Tensor(rand((2, 5, 5), 15), grad_enabled=True)
    w = Tensor(rand((2, 2, 3, 3), 16, scale=0.4), grad_enabled=True)
    b = Tensor(rand((2,), 17), grad_enabled=True)
    probe = Tensor(rand((2, 3, 3), 18))

    def f():
        return (conv2d(x, w, b, stride=2, padding=1) * probe).sum()

    assert finite_diff_check(f, [x, w, b]) < 1e-7


# -- upsample_bilinear ---------------------------------------------------------------


def upsample_oracle(x, factor):
    """Per-pixel align-corners-false interpolation, written as scalar loops."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor))
    for ch in range(c):
        for oy in range(h * factor):
            for ox in range(w * factor):
                sy = max((oy + 0.5) / factor - 0.5, 0.0)
                sx = max((ox + 0.5) / factor - 0.5, 0.0)
                y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
                y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                fy, fx = sy - y0, sx - x0
                out[ch, oy, ox] = (
                    x[ch, y0, x0] * (1 - fy) * (1 - fx)
                    + x[ch, y0, x1] * (1 - fy) * fx
                    + x[ch, y1, x0] * fy * (1 - fx)
                    + x[ch, y1, x1] * fy * fx
                )
    return out


def test_upsample_constant_stays_constant():
    out = upsample_bilinear(Tensor(np.full((2, 3, 3), 0.7)), 4)
    assert out.data.shape == (2, 12, 12)
    np.testing.assert_allclose(out.data, 0.7, atol=1e-15)


def test_upsample_factor_composition_shapes():
    x = Tensor(rand((1, 3, 5), 19))
    twice = upsample_bilinear(upsample_bilinear(x, 2), 2)
    assert twice.data.shape == upsample_bilinear(x, 4).data.shape


def test_upsample_known_2x2():
    x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    got = upsample_bilinear(Tensor(x), 2).data
    np.testing.assert_allclose(got, upsample_oracle(x, 2), atol=1e-15)


@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4]), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_upsample_matches_oracle(c, h, w, factor, seed):
    x = rand((c, h, w), seed)
    np.testing.assert_allclose(
        upsample_bilinear(Tensor(x), factor).data, upsample_oracle(x, factor), atol=1e-12
    )


def test_upsample_unsupported_factor():
    with pytest.raises(ConfigError):
        upsample_bilinear(Tensor(np.zeros((1, 2, 2))), 3)


def test_upsample_gradient():
    x = Tensor(rand((1, 3, 3), 21), grad_enabled=True)
    probe = Tensor(rand((1, 6, 6), 22))

    def f():
        return (upsample_bilinear(x, 2) * probe).sum()

    assert finite_diff_check(f, [x]) < 1e-8


# -- layer_norm -----------------------------------------------------------------------


def layer_norm_oracle(row, gamma, beta, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [gamma[i] * (row[i] - mu) / math.sqrt(var + eps) + beta[i] for i in range(len(row))]


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 4), 5.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, np.zeros((2, 4)), atol=1e-12)


def test_layer_norm_zero_gamma_gives_beta():
    beta = rand((4,), 23)
    out = layer_norm(Tensor(rand((3, 4), 24)), Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.tile(beta, (3, 1)), atol=1e-15)


def test_layer_norm_against_scalar_oracle():
    row = [1.0, 2.0, 3.0]
    gamma, beta = [1.5, 0.5, 2.0], [0.1, -0.2, 0.3]
    got = layer_norm(Tensor([row]), Tensor(gamma), Tensor(beta)).data[0]
    np.testing.assert_allclose(got, layer_norm_oracle(row, gamma, beta), atol=1e-12)


def test_layer_norm_gradients():
    x = Tensor(rand((3, 5), 25), grad_enabled=True)
    gamma = Tensor(rand((5,), 26), grad_enabled=True)
    beta = Tensor(rand((5,), 27), grad_enabled=True)
    probe = Tensor(rand((3, 5), 28))

    def f():
        return (layer_norm(x, gamma, beta) * probe).sum()

    assert finite_diff_check(f, [x, gamma, beta]) < 1e-7


# -- backward and the tape --------------------------------------------------------------


def test_backward_of_sum_is_ones():
    p = Tensor(rand((3, 3), 29), grad_enabled=True)
    with record():
        backward(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones((3, 3)))


def test_backward_unreachable_parameter_stays_zero():
    p = Parameter(rand((2, 2), 30), "p")
    q = Parameter(rand((2, 2), 31), "q")
    with record():
        backward((q.tensor * 2.0).sum())
    np.testing.assert_array_equal(p.grad, np.zeros((2, 2)))


def test_backward_quadratic_matches_closed_form():
    a = rand((4, 3), 32)
    p = Tensor(rand((3, 1), 33), grad_enabled=True)

    def f():
        ap = matmul(Tensor(a), p)
        return (ap * ap).sum()

    with record():
        backward(f())
    np.testing.assert_allclose(p.grad, 2.0 * a.T @ a @ p.data, atol=1e-10)
    assert finite_diff_check(f, [p]) < 1e-6


def test_backward_rejects_non_scalar():
    p = Tensor(rand((2, 2), 34), grad_enabled=True)
    with record():
        out = p * 2.0
        with pytest.raises(UsageError):
            backward(out)


def test_backward_twice_rejected():
    p = Tensor(rand((2,), 35), grad_enabled=True)
    with record():
        loss = p.sum()
        backward(loss)
        with pytest.raises(GraphError):
            backward(loss)


def test_gradient_accumulates_across_recordings():
    p = Tensor(rand((3,), 36), grad_enabled=True)
    with record():
        backward((p * 2.0).sum())
    g1 = p.grad.copy()
    with record():
        backward((p * 3.0).sum())
    np.testing.assert_allclose(p.grad, g1 + 3.0, atol=1e-15)
    np.testing.assert_allclose(g1, 2.0, atol=1e-15)


def test_detach_blocks_gradient():
    p = Tensor(rand((3,), 37), grad_enabled=True)
    q = Tensor(rand((3,), 38), grad_enabled=True)
    with record():
        backward((p.detach() * 5.0 + q).sum())
    np.testing.assert_array_equal(p.grad, np.zeros(3))
    np.testing.assert_array_equal(q.grad, np.ones(3))


def test_retain_grad_on_intermediate():
    p = Tensor(rand((3,), 38), grad_enabled=True)
    with record():
        mid = p * 2.0
        mid.retain_grad()
        backward((mid * 3.0).sum())
    np.testing.assert_allclose(mid.grad, 3.0, atol=1e-15)


def test_loss_without_graph_rejected():
    p = Tensor(rand((3,), 39), grad_enabled=True)
    loss = p.sum()  # no active recording
    with pytest.raises(GraphError):
        backward(loss)


# -- finite_diff_check -------------------------------------------------------------------


def test_finite_diff_sum_tiny_error():
    x = Tensor(rand((4,), 40), grad_enabled=True)
    assert finite_diff_check(x.sum, [x]) < 1e-10


def test_finite_diff_quadratic():
    x = Tensor(rand((5,), 41), grad_enabled=True)

    def f():
        return (x * x).sum()

    assert finite_diff_check(f, [x]) < 1e-6


def test_finite_diff_rejects_nondeterministic_objective():
    x = Tensor(rand((2,), 42), grad_enabled=True)
    rng = np.random.default_rng(0)

    def f():
        return (x * rng.normal()).sum()

    with pytest.raises(OracleError):
        finite_diff_check(f, [x])


def test_finite_diff_rejects_bad_eps():
    x = Tensor(rand((2,), 43), grad_enabled=True)
    with pytest.raises(ConfigError):
        finite_diff_check(x.sum, [x], eps=0.0)


# -- misc ops used across the model ------------------------------------------------------


def test_elementwise_gradients():
    x = Tensor(np.abs(rand((6,), 44)) + 0.5, grad_enabled=True)

    def f():
        y = x.exp().log() + x.sqrt() + x.gelu() + x.relu()
        return (y * y).sum()

    assert finite_diff_check(f, [x]) < 1e-6


def test_div_and_rsub_gradients():
    a = Tensor(rand((4,), 45), grad_enabled=True)
    b = Tensor(np.abs(rand((4,), 46)) + 1.0, grad_enabled=True)

    def f():
        return ((a / b) + (1.0 - a) + (2.0 / b)).sum()

    assert finite_diff_check(f, [a, b]) < 1e-7


def test_clamp_gradient_inside_and_outside():
    x = Tensor(np.array([-1.0, 0.25, 0.75, 2.0]), grad_enabled=True)
    with record():
        backward(x.clamp(0.0, 1.0).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])


def test_getitem_concat_reshape_transpose_gradients():
    x = Tensor(rand((4, 6), 47), grad_enabled=True)
    probe = Tensor(rand((6, 4), 48))

    def f():
        parts = concat([x[:, 0:3], x[:, 3:6]], axis=1)
        return (parts.T.reshape(6, 4) * probe).sum()

    assert finite_diff_check(f, [x]) < 1e-8


def test_broadcast_add_mul_gradients():
    x = Tensor(rand((3, 4), 49), grad_enabled=True)
    row = Tensor(rand((4,), 50), grad_enabled=True)

    def f():
        return ((x + row) * row).sum()

    assert finite_diff_check(f, [x, row]) < 1e-7


def test_mean_axis_tuple_gradient():
    x = Tensor(rand((2, 4, 6), 51), grad_enabled=True)
    probe = Tensor(rand((2,), 52))

    def f():
        return (x.mean(axis=(1, 2)) * probe).sum()

    assert finite_diff_check(f, [x]) < 1e-8


def test_tensor_rejects_non_finite():
    from maskattn.errors import NumericError

    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.inf]))


def test_randomized_op_battery_finite_diff():
    """Every differentiable op, randomized shapes/values, many seeded cases."""
    failures = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x = Tensor(rng.normal(size=(n, m)), grad_enabled=True)
        y = Tensor(rng.normal(size=(m, n)), grad_enabled=True)
        gamma = Tensor(rng.normal(size=(n,)) + 1.0, grad_enabled=True)
        beta = Tensor(rng.normal(size=(n,)), grad_enabled=True)
        probe = Tensor(rng.normal(size=(n, n)))

        def f():
            z = matmul(x, y)
            z = layer_norm(z, gamma, beta)
            z = softmax(z, axis=1)
            return (z.gelu() * probe).sum()

        err = finite_diff_check(f, [x, y, gamma, beta])
        if err >= 1e-4:
            failures.append((seed, err))
    assert not failures, f"finite-difference failures: {failures}"
