import numpy as np
import pytest

from stattok import tensor as T
from stattok.gradcheck import grad_check, grad_check_params
from stattok.tensor import Tensor


def test_quadratic_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    err = grad_check(lambda t: T.tsum(T.square(t)), x)
    assert err < 1e-4


def test_epsilon_bounds_enforced():
    x = Tensor(np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), x, epsilon=1e-6)
    with pytest.raises(ValueError):
        grad_check(lambda t: T.tsum(t), x, epsilon=0.5)


def test_nonfinite_function_value_raises():
    x = Tensor(np.zeros(2))
    with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
        grad_check(lambda t: T.tsum(T.log(t)), x)


def test_requires_scalar_output():
    x = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        grad_check(lambda t: T.square(t), x)


def test_detects_wrong_gradient():
    # stop_gradient on one factor makes the analytic grad x instead of 2x
    def broken(t):
        return T.tsum(T.mul(T.stop_gradient(t), t))

    x = Tensor(np.random.default_rng(1).normal(size=(3,)) + 3.0)
    err = grad_check(broken, x)
    assert err > 1e-2


def test_grad_check_params_on_linear_model():
    from stattok.nn import Linear
    lin = Linear(np.random.default_rng(2), 3, 2, dtype=np.float64)
    x = Tensor(np.random.default_rng(3).normal(size=(5, 3)))

    errors = grad_check_params(lambda: T.tsum(T.square(lin(x))),
                               [("weight", lin.weight), ("bias", lin.bias)])
    assert max(errors.values()) < 1e-4
