import numpy as np
import pytest

from wvt.conv import conv3d
from wvt.errors import ConfigError, DimensionError
from wvt.gradcheck import grad_check
from wvt.tensor import Tensor, tsum


def test_sum_kernel():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2))
    w = Tensor(np.ones((1, 1, 1, 2, 2)))
    y = conv3d(x, w)
    assert y.shape == (1, 1, 1, 1, 1)
    assert y.item() == 10.0


def test_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 1, 3, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    np.testing.assert_array_equal(conv3d(x, w, b).data, x.data)


def test_same_padding_shape_and_grad():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 3, 4, 8, 8)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 3, 3, 3, 3)) * 0.2, requires_grad=True)
    b = Tensor(rng.standard_normal(6) * 0.1, requires_grad=True)
    y = conv3d(x, w, b, padding="same")
    assert y.shape == (1, 6, 4, 8, 8)
    err = grad_check(lambda x, w, b: tsum(conv3d(x, w, b, padding="same") ** 2.0), [x, w, b],
                     max_coords=60, rng=rng)
    assert err <= 1e-4


def test_strided_valid_shapes():
    x = Tensor(np.zeros((1, 3, 9, 9, 9)))
    w = Tensor(np.zeros((4, 3, 3, 3, 3)))
    y = conv3d(x, w, stride=2)
    # floor((9 - 3)/2) + 1 = 4 per axis
    assert y.shape == (1, 4, 4, 4, 4)


def test_patch_stride_equals_kernel():
    # non-overlapping windows: each output cell is one patch contraction
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 4, 6, 6))
    w = rng.standard_normal((5, 2, 2, 3, 3))
    y = conv3d(Tensor(x), Tensor(w), stride=(2, 3, 3)).data
    assert y.shape == (1, 5, 2, 2, 2)
    patch = x[0, :, 2:4, 3:6, 0:3]
    np.testing.assert_allclose(y[0, :, 1, 1, 0], np.tensordot(w, patch, axes=4), rtol=1e-10)


def test_patch_stride_gradcheck():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 2, 4, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 2, 2, 3, 3)) * 0.3, requires_grad=True)
    err = grad_check(lambda x, w: tsum(conv3d(x, w, stride=(2, 3, 3)) ** 2.0), [x, w],
                     max_coords=60, rng=rng)
    assert err <= 1e-4


def test_strided_overlapping_gradcheck():
    # stride 2 with kernel 3: overlapping windows plus uncovered tail cells
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 2, 6, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    err = grad_check(lambda x, w: tsum(conv3d(x, w, stride=2) ** 2.0), [x, w],
                     max_coords=80, rng=rng)
    assert err <= 1e-4


def test_depthwise_params_and_grad():
    c = 8
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((c, 1, 3, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(np.zeros(c), requires_grad=True)
    assert w.size == c * 27 and b.size == c
    x = Tensor(rng.standard_normal((1, c, 3, 5, 5)), requires_grad=True)
    y = conv3d(x, w, b, padding="same", groups=c)
    assert y.shape == x.shape
    # channel independence: channel j of the output ignores channel i != j
    x2 = x.data.copy()
    x2[0, 0] += 1.0
    y2 = conv3d(Tensor(x2), w, b, padding="same", groups=c)
    np.testing.assert_array_equal(y2.data[0, 1:], y.data[0, 1:])
    assert not np.array_equal(y2.data[0, 0], y.data[0, 0])
    err = grad_check(lambda x, w, b: tsum(conv3d(x, w, b, padding="same", groups=c) ** 2.0),
                     [x, w, b], max_coords=60, rng=rng)
    assert err <= 1e-4


def test_grouped_general():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 4, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 2, 1, 3, 3)) * 0.3, requires_grad=True)
    y = conv3d(x, w, groups=2)
    assert y.shape == (1, 6, 2, 2, 2)
    err = grad_check(lambda x, w: tsum(conv3d(x, w, groups=2) ** 2.0), [x, w],
                     max_coords=60, rng=rng)
    assert err <= 1e-4


def test_errors():
    x = Tensor(np.zeros((1, 4, 2, 4, 4)))
    with pytest.raises(ConfigError):
        conv3d(x, Tensor(np.zeros((6, 1, 1, 1, 1))), groups=3)
    with pytest.raises(DimensionError):
        conv3d(x, Tensor(np.zeros((2, 3, 1, 1, 1))))
    with pytest.raises(DimensionError):
        conv3d(x, Tensor(np.zeros((2, 4, 3, 3, 3))))  # kt=3 > T=2
    with pytest.raises(ConfigError):
        conv3d(x, Tensor(np.zeros((2, 4, 1, 2, 2))), padding="same")  # even kernel
    with pytest.raises(ConfigError):
        conv3d(x, Tensor(np.zeros((2, 4, 1, 1, 1))), padding="reflect")
