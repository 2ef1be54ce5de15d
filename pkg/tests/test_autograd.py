import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from canondiff import autograd as ag
from canondiff.autograd import NumericError, Tensor

from conftest import central_diff


def check_grad(fn, *shapes, rng, positive=False, tol=1e-5):
    """Compare autodiff and central differences for scalar ``fn`` of several inputs."""
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    grads = ag.grad(fn(*ts), ts)
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(xs[j]) for j in range(len(xs))]
            return float(fn(*args).data)
        fd = central_diff(f, x.copy())
        err = np.abs(grads[k] - fd) / (np.abs(grads[k]) + 1e-8)
        # tiny entries are compared absolutely
        ok = (err < tol) | (np.abs(grads[k] - fd) < 1e-8)
        assert ok.all(), f"input {k}: max rel err {err.max():.2e}"


def test_square_at_three():
    p = Tensor(3.0, requires_grad=True)
    (g,) = ag.grad(p * p, [p])
    assert g == pytest.approx(6.0)


def test_sum_of_product_gives_transpose():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]])
    B = Tensor(np.eye(2), requires_grad=True)
    (g,) = ag.grad(ag.matmul(A, B).sum(), [B])
    # d/dB sum(A B) = A^T 1 1^T: every column is the row sums of A^T
    expected = A.data.T @ np.ones((2, 2))
    np.testing.assert_allclose(g, expected)
    fd = central_diff(lambda b: float((A.data @ b).sum()), np.eye(2))
    np.testing.assert_allclose(g, fd, atol=1e-9)


@pytest.mark.parametrize("name,fn,shapes,positive", [
    ("add_broadcast", lambda a, b: (a + b).sum(), [(3, 4), (4,)], False),
    ("sub", lambda a, b: ag.square(a - b).sum(), [(2, 3), (2, 3)], False),
    ("mul_broadcast", lambda a, b: (a * b).sum(), [(2, 3, 4), (3, 1)], False),
    ("div", lambda a, b: (a / b).sum(), [(3,), (3,)], True),
    ("matmul_batched", lambda a, b: ag.tanh(a @ b).sum(), [(2, 3, 4), (4, 5)], False),
    ("mean_axis", lambda a: ag.square(a.mean(axis=1)).sum(), [(3, 4)], False),
    ("reshape_transpose", lambda a: (ag.transpose(a.reshape(4, 3), (1, 0)) * np.arange(12.).reshape(3, 4)).sum(),
     [(2, 6)], False),
    ("getitem", lambda a: ag.square(a[1:, ::2]).sum(), [(3, 4)], False),
    ("concat", lambda a, b: (ag.concat([a, b], axis=0) * np.arange(10.)[:, None]).sum(), [(4, 2), (6, 2)], False),
    ("stack", lambda a, b: ag.square(ag.stack([a, b], axis=-1)).sum(), [(3,), (3,)], False),
    ("relu", lambda a: (ag.relu(a) * np.arange(6.)).sum(), [(6,)], False),
    ("silu", lambda a: ag.silu(a).sum(), [(5,)], False),
    ("tanh", lambda a: ag.tanh(a).sum(), [(5,)], False),
    ("sqrt", lambda a: ag.sqrt(a).sum(), [(5,)], True),
    ("norm", lambda a: ag.norm(a, axis=-1).sum(), [(4, 3)], False),
    ("softmax", lambda a: (ag.softmax(a) * np.arange(5.)).sum(), [(2, 5)], False),
    ("broadcast", lambda a: (ag.broadcast_to(a, (3, 4)) * np.arange(12.).reshape(3, 4)).sum(), [(1, 4)], False),
])
def test_primitives_match_finite_differences(name, fn, shapes, positive, rng):
    check_grad(fn, *shapes, rng=rng, positive=positive)


def test_small_net_matches_finite_differences(rng):
    def net(x, w1, w2):
        return ag.square(ag.silu(x @ w1) @ w2).mean()
    check_grad(net, (5, 3), (3, 4), (4, 2), rng=rng)


def test_norm_clamp_gives_zero_gradient_at_origin():
    v = Tensor(np.zeros((2, 3)), requires_grad=True)
    (g,) = ag.grad(ag.norm(v).sum(), [v])
    assert np.all(g == 0.0)


def test_backward_twice_rejected():
    p = Tensor(2.0, requires_grad=True)
    loss = p * p
    ag.backward(loss)
    with pytest.raises(RuntimeError):
        ag.backward(loss)


def test_non_scalar_loss_rejected():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ag.backward(p * 2.0)


def test_nan_gradient_names_op():
    p = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with pytest.raises(NumericError) as e:
        ag.grad(ag.sqrt(p).sum(), [p])
    assert e.value.op == "sqrt"


def test_unreachable_parameter_gets_zeros():
    p, q = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    gp, gq = ag.grad((p * 3.0).sum(), [p, q])
    np.testing.assert_array_equal(gp, [3.0, 3.0])
    np.testing.assert_array_equal(gq, np.zeros(3))


def test_silu_is_finite_for_large_inputs():
    x = Tensor(np.array([-1e4, 1e4]), requires_grad=True)
    (g,) = ag.grad(ag.silu(x).sum(), [x])
    assert np.all(np.isfinite(g))
    np.testing.assert_allclose(g, [0.0, 1.0])


@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_backward_is_linear_in_the_loss(a, b):
    w = np.arange(12.0).reshape(3, 4) / 7.0

    def loss1(x):
        return ag.tanh(x * w).sum()

    def loss2(x):
        return ag.square(x - b).sum()

    x = Tensor(a, requires_grad=True)
    (g_sum,) = ag.grad(loss1(x) + loss2(x), [x])
    (g1,) = ag.grad(loss1(x), [x])
    (g2,) = ag.grad(loss2(x), [x])
    np.testing.assert_allclose(g_sum, g1 + g2, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_grad_of_dot_is_other_operand(a):
    b = np.array([1.0, -2.0, 0.5, 3.0])
    x = Tensor(a, requires_grad=True)
    (g,) = ag.grad((x * b).sum(), [x])
    np.testing.assert_array_equal(g, b)
