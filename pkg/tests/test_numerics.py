import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import composite_case, gradcheck, primitive_cases
from oracles import naive_conv2d, singular_values_oracle
from weightrep.numerics import (SGD, Adam, ConvergenceError, GraphError, NonFiniteError, Tensor,
                                backward, conv2d, precision, singular_values)


# --------------------------------------------------------------------------- conv2d


def test_conv_all_ones():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_centered_delta_is_identity(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 1, 6, 6)).astype(np.float32)
    kern = np.zeros((1, 1, k, k), np.float32)
    kern[0, 0, k // 2, k // 2] = 1.0
    np.testing.assert_array_equal(conv2d(x, kern, 1, k // 2).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(1, 2, 4, 4))
    kern = rng.normal(size=(3, 2, 3, 3))
    expected = naive_conv2d(x, kern, stride, pad)
    with precision(np.float64):
        out = conv2d(x, kern, stride, pad).data
    assert out.shape == expected.shape
    np.testing.assert_allclose(out, expected, atol=1e-6, rtol=0)
    np.testing.assert_allclose(conv2d(x, kern, stride, pad).data, expected, atol=1e-5, rtol=0)


def test_conv_output_size_formula():
    out = conv2d(np.zeros((2, 3, 7, 9), np.float32), np.zeros((4, 3, 3, 3), np.float32), stride=2, pad=1)
    assert out.shape == (2, 4, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv_errors():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=0)
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 5, 5))
    kern = rng.normal(size=(3, 2, 3, 3))
    with precision(np.float64):
        lhs = conv2d(a * x + b * y, kern, 1, 1).data
        rhs = a * conv2d(x, kern, 1, 1).data + b * conv2d(y, kern, 1, 1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# --------------------------------------------------------------------------- autodiff


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(5.0), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_reused_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    backward((y + y * x).sum())  # 2x^2... d/dx(x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [2 * 3 + 3 * 9])


def test_backward_leaves_constants_untouched():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 6.0])
    backward((x * c).sum())
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [5.0, 6.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x * 2)
    with pytest.raises(GraphError):
        backward(Tensor(np.ones(3)).sum())


def test_non_finite_is_an_error():
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError):
        Tensor([-1.0]).log()
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


@pytest.mark.parametrize("name,build", primitive_cases(), ids=[n for n, _ in primitive_cases()])
def test_primitive_gradients(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        fn, arrays = build(rng)
        assert gradcheck(fn, arrays) <= 1e-3, name


def test_composite_graph_gradient():
    rng = np.random.default_rng(7)
    for _ in range(5):
        fn, arrays = composite_case(rng)
        assert gradcheck(fn, arrays) <= 1e-3


# --------------------------------------------------------------------------- SVD


def test_singular_values_identity():
    np.testing.assert_allclose(singular_values(np.eye(3)), [1, 1, 1], atol=1e-12)


def test_singular_values_diag():
    np.testing.assert_allclose(singular_values(np.diag([3.0, 2.0, 1.0])), [3, 2, 1], atol=1e-12)
    np.testing.assert_allclose(singular_values(np.diag([1.0, 3.0, 2.0])), [3, 2, 1], atol=1e-12)


def test_singular_values_random_against_eigen_oracle():
    M = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(singular_values(M), singular_values_oracle(M), atol=1e-6, rtol=0)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (3, 8), (8, 3), (16, 16)])
def test_singular_values_properties(shape):
    rng = np.random.default_rng(shape[0] * 100 + shape[1])
    M = rng.normal(size=shape)
    s = singular_values(M)
    assert len(s) == min(shape)
    assert np.all(s >= 0)
    assert np.all(np.diff(s) <= 0)
    assert abs(np.sum(s ** 2) - np.sum(M ** 2)) <= 1e-5 * np.sum(M ** 2)


def test_singular_values_rank_deficient():
    u = np.arange(1.0, 5.0)[:, None]
    s = singular_values(u @ u.T)
    np.testing.assert_allclose(s, [30.0, 0, 0, 0], atol=1e-9)


def test_singular_values_budget_exhausted():
    M = np.random.default_rng(1).normal(size=(4, 4))
    with pytest.raises(ConvergenceError):
        singular_values(M, max_sweeps=0)


# --------------------------------------------------------------------------- optimizers


def test_adam_first_step():
    w = Tensor([1.0], requires_grad=True)
    opt = Adam([w], lr=0.1, eps=1e-8)
    w.grad = np.array([2.0], np.float32)
    opt.step()
    assert w.data[0] == pytest.approx(0.9, abs=1e-7)
    assert opt.state.step_count == 1


def test_adam_zero_gradient_decays_moments():
    w = Tensor([1.0, -1.0], requires_grad=True)
    opt = Adam([w], lr=0.1)
    w.grad = np.array([2.0, 2.0], np.float32)
    opt.step()
    m1, v1 = opt.state.m[0].copy(), opt.state.v[0].copy()
    before = w.data.copy()
    w.grad = np.zeros(2, np.float32)
    opt.step()
    np.testing.assert_allclose(opt.state.m[0], 0.9 * m1)
    np.testing.assert_allclose(opt.state.v[0], 0.999 * v1)
    assert opt.state.step_count == 2
    # the bias-corrected first moment still moves the weights; with a fresh state nothing moves
    fresh = Tensor([1.0], requires_grad=True)
    opt2 = Adam([fresh], lr=0.1)
    fresh.grad = np.zeros(1, np.float32)
    opt2.step()
    assert fresh.data[0] == 1.0
    assert not np.array_equal(before, w.data)


def test_sgd_step():
    w = Tensor([1.0], requires_grad=True)
    opt = SGD([w], lr=0.5)
    w.grad = np.array([2.0], np.float32)
    opt.step()
    assert w.data[0] == 0.0


def test_optimizer_shape_mismatch():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([w])
    w.grad = np.ones(2, np.float32)
    with pytest.raises(ValueError):
        opt.step()


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(4, 3)).astype(np.float32)
    w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    opt = Adam([w], lr=0.05)
    losses = []
    for _ in range(30):
        opt.zero_grad()
        diff = w - target
        loss = (diff * diff).sum()
        backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses, w.data.copy()


def test_optimizer_determinism():
    a, wa = _trajectory(3)
    b, wb = _trajectory(3)
    assert a == b
    assert np.array_equal(wa, wb)
    assert a[-1] < a[0]
