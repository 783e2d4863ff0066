import numpy as np
import pytest

from dagan.nn import Tensor, grad, grad_check
from dagan.nn import functional as F
from dagan.nn.gradcheck import GradCheckError, relative_error


def test_quadratic_passes():
    rep = grad_check(lambda x: (x * x).sum(), [np.array([1.0, -2.0, 3.0])])
    assert rep.passed and rep.worst < 1e-9


def test_wrong_gradient_is_detected():
    from dagan.nn.tensor import _make

    def bad_square(x):
        return _make(x.data ** 2, (x,), lambda g: (g * x * 3.0,))

    rep = grad_check(lambda x: bad_square(x).sum(), [np.array([1.0, 2.0])])
    assert not rep.passed and rep.worst > 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_probe_raises():
    with pytest.raises(GradCheckError):
        grad_check(lambda x: (x.log()).sum(), [np.array([1e-6])], h=1e-5)


def test_scalar_output_required():
    with pytest.raises(ValueError):
        grad_check(lambda x: x * 2.0, [np.ones(2)])


def test_double_backward_through_conv_and_layer_norm(rng):
    w = rng.normal(size=(2, 1, 3, 3))
    g, b = np.ones(2), np.zeros(2)

    def penalty(x):
        y = F.leaky_relu(F.layer_norm(F.conv2d(x, Tensor(w)), Tensor(g), Tensor(b)), 0.2).tanh().sum()
        (gx,) = grad(y, [x], create_graph=True)
        return (gx * gx).sum()

    rep = grad_check(penalty, [rng.normal(size=(2, 1, 4, 4))])
    assert rep.passed, rep.max_rel_error


def test_relative_error_is_normwise():
    assert relative_error(np.array([1.0, 1e-9]), np.array([1.0, 0.0])) == pytest.approx(1e-9)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    # a vanishing gradient is judged against the floor: roundoff passes, a real mismatch does not
    assert relative_error(np.zeros(2), np.array([1e-11, -1e-11])) < 1e-6
    assert relative_error(np.array([1e-6, 0.0]), np.zeros(2)) > 1e-3
