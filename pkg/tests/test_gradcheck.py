import numpy as np
import pytest

from wvt.errors import NumericError
from wvt.gradcheck import grad_check
from wvt.optim import Adam
from wvt.errors import ConfigError
from wvt.tensor import Tensor, log, tsum


def test_sum_is_exact():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert grad_check(tsum, x) < 1e-10


def test_quadratic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    err = grad_check(lambda x: tsum(x ** 2.0), x)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert err < 1e-6


def test_rejects_float32():
    with pytest.raises(NumericError):
        grad_check(tsum, Tensor(np.zeros(3, dtype=np.float32)))


def test_rejects_nonfinite():
    x = Tensor(np.array([-1.0]))
    with np.errstate(invalid="ignore"):  # log(-1) is the point of the test
        with pytest.raises(NumericError):
            grad_check(lambda x: tsum(log(x)), x)


class TestAdam:
    def test_zero_grad_no_motion(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert opt.t == 1

    def test_signed_step(self):
        # beta1 = beta2 = 0 collapses to sign-scaled SGD on the first step
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p], lr=0.1, beta1=0.0, beta2=0.0)
        p.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9], atol=1e-6)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            p = Tensor(rng.standard_normal(5), requires_grad=True)
            opt = Adam([p], lr=0.01)
            for _ in range(10):
                p.grad = rng.standard_normal(5)
                opt.step()
            return p.data.copy()
        np.testing.assert_array_equal(run(), run())

    def test_bad_lr(self):
        with pytest.raises(ConfigError):
            Adam([], lr=0.0)
