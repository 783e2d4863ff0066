import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagan.nn import Tensor, backward, grad, grad_check, no_grad, precision
from dagan.nn import tensor as T
from dagan.nn.tensor import DimensionError


def _rand(rng, *shape):
    return rng.normal(size=shape)


ELEMENTWISE = {
    "add_broadcast": (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: (a - b * 2.0).sum(), [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: (a * b).sum(), [(2, 3, 4), (3, 1)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(3, 3), (3, 3)]),
    "power": (lambda a: ((a * a + 1.0) ** 1.5).sum(), [(5,)]),
    "exp": (lambda a: a.exp().sum(), [(4, 2)]),
    "log": (lambda a: (a * a + 0.5).log().sum(), [(4, 2)]),
    "tanh": (lambda a: a.tanh().sum(), [(6,)]),
    "mean_axis": (lambda a: (a.mean(axis=1) ** 2.0).sum(), [(3, 5)]),
    "sum_keepdims": (lambda a: (a.sum(axis=(0, 2), keepdims=True) * a).sum(), [(2, 3, 2)]),
    "reshape_transpose": (lambda a: (a.reshape(6, 2).transpose() @ a.reshape(6, 2)).sum(), [(3, 4)]),
    "matmul_batched": (lambda a, b: ((a @ b) ** 2.0).sum(), [(2, 3, 4), (4, 5)]),
    "getitem": (lambda a: (a[1:, ::2] ** 2.0).sum(), [(4, 5)]),
    "concat": (lambda a, b: (T.concat([a, b], axis=1) ** 2.0).sum(), [(2, 3), (2, 2)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradients_match_finite_differences(name, rng):
    f, shapes = ELEMENTWISE[name]
    rep = grad_check(f, [_rand(rng, *s) for s in shapes])
    assert rep.passed, (name, rep.max_rel_error)


def test_broadcast_adjoint_is_sum_to(rng):
    a = Tensor(rng.normal(size=(3,)), requires_grad=True)
    out = T.broadcast_to(a, (4, 3))
    (g,) = grad(out.sum(), [a])
    np.testing.assert_array_equal(g.data, np.full(3, 4.0))


def test_backward_accumulates_into_leaves():
    a = Tensor([1.0, 2.0], requires_grad=True)
    backward((a * a).sum())
    backward((a * 3.0).sum())
    np.testing.assert_allclose(a.grad, [2.0 + 3.0, 4.0 + 3.0])


def test_grad_leaves_dot_grad_untouched_and_zero_for_unreachable():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    ga, gb = grad((a * 2.0).sum(), [a, b])
    assert a.grad is None and b.grad is None
    assert ga.data[0] == 2.0 and gb.data[0] == 0.0


def test_second_derivative_of_cube():
    with precision(np.float64):
        x = Tensor([1.5], requires_grad=True)
        (g,) = grad((x ** 3.0).sum(), [x], create_graph=True)
        (h,) = grad(g.sum(), [x])
    assert h.data[0] == pytest.approx(6 * 1.5)


def test_no_grad_records_nothing():
    a = Tensor([1.0], requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad and b._ctx is None


def test_concat_rejects_mismatched_dims():
    with pytest.raises(DimensionError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_matmul_needs_matrices():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000))
def test_sum_to_inverts_broadcast(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cols,))
    big = np.broadcast_to(x, (rows, cols))
    np.testing.assert_allclose(T._sum_to_np(big, (cols,)), rows * x)


def test_unfold_and_fold_are_adjoint(rng):
    # <unfold(x), y> == <x, fold(y)>
    x = rng.normal(size=(2, 3, 5, 6))
    pads = (1, 1, 0, 1)
    cols = T._unfold_np(x, 3, 2, 2, pads)
    y = rng.normal(size=cols.shape)
    lhs = float((cols * y).sum())
    rhs = float((x * T._fold_np(y, x.shape, 3, 2, 2, pads)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_gradient_flow_is_fixed_when_the_graph_is_built():
    w = Tensor(np.array([2.0]), requires_grad=True)
    x = Tensor(np.array([3.0]), requires_grad=True)
    w.requires_grad = False
    y = (w * x).sum()
    w.requires_grad = True
    y.backward()
    assert w.grad is None
    np.testing.assert_allclose(x.grad, [2.0])
