"""Tensor engine: forward semantics, tape mechanics, and gradient correctness.

Every differentiable primitive gets a central finite-difference check on a
small randomized float64 instance (h = 1e-5, relative error < 1e-4).  Shapes
are chosen to exercise broadcasting so the gradient un-broadcast path runs.
"""

from __future__ import annotations

import numpy as np
import pytest

from lineplace import nn
from lineplace.nn import tensor as T
from lineplace.nn.gradcheck import check_gradients

TOL = 1e-4


def _param(rng, shape, scale=1.0, offset=0.0):
    return nn.Tensor(offset + scale * rng.normal(size=shape), requires_grad=True, dtype=np.float64)


# -- construction and dtype ----------------------------------------------------


def test_tensor_keeps_float_dtype():
    assert nn.Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
    assert nn.Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32


def test_tensor_promotes_integers_to_default():
    assert nn.Tensor(np.arange(4)).dtype == nn.DEFAULT_DTYPE


def test_float32_arithmetic_stays_float32():
    a = nn.Tensor(np.ones((2, 3), dtype=np.float32))
    b = nn.Tensor(np.ones((2, 3), dtype=np.float32))
    assert (a + b).dtype == np.float32
    assert (a * b).dtype == np.float32
    assert nn.matmul(a, b.transpose()).dtype == np.float32


def test_as_tensor_passthrough():
    t = nn.Tensor([1.0])
    assert nn.as_tensor(t) is t


def test_detach_cuts_gradient():
    x = _param(np.random.default_rng(0), (3,))
    with nn.Tape() as tape:
        y = nn.tensor_sum(nn.stop_gradient(x) * x)
        tape.backward(y)
    # only the live branch contributes: d/dx (c * x) = c
    np.testing.assert_allclose(x.grad, x.data)


# -- tape mechanics -------------------------------------------------------------


def test_tape_is_single_use():
    x = _param(np.random.default_rng(1), (4,))
    with nn.Tape() as tape:
        y = nn.tensor_sum(x * x)
    tape.backward(y)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(y)


def test_no_tape_records_nothing():
    x = _param(np.random.default_rng(2), (4,))
    y = x * x
    assert y.grad is None and not y.requires_grad


def test_gradients_accumulate_across_reuse():
    x = _param(np.random.default_rng(3), (3,))
    with nn.Tape() as tape:
        y = nn.tensor_sum(x * x + x * x)
        tape.backward(y)
    np.testing.assert_allclose(x.grad, 4.0 * x.data, rtol=1e-12)


def test_backward_seed_scales_gradient():
    x = _param(np.random.default_rng(4), (3,))
    with nn.Tape() as tape:
        y = x * 2.0
        tape.backward(y, seed=np.array([1.0, 0.0, -1.0]))
    np.testing.assert_allclose(x.grad, [2.0, 0.0, -2.0])


# -- forward values --------------------------------------------------------------


def test_elementwise_forward_values():
    a = nn.Tensor(np.array([1.0, 4.0, 9.0]))
    np.testing.assert_allclose((a + 1.0).data, [2, 5, 10])
    np.testing.assert_allclose((a - 1.0).data, [0, 3, 8])
    np.testing.assert_allclose((a * 2.0).data, [2, 8, 18])
    np.testing.assert_allclose((a / 2.0).data, [0.5, 2, 4.5])
    np.testing.assert_allclose((-a).data, [-1, -4, -9])
    np.testing.assert_allclose((a ** 0.5).data, [1, 2, 3])
    np.testing.assert_allclose(nn.sqrt(a).data, [1, 2, 3])
    np.testing.assert_allclose(nn.log(nn.exp(a)).data, a.data, rtol=1e-6)


def test_clip_forward():
    a = nn.Tensor(np.array([-2.0, 0.5, 3.0]))
    np.testing.assert_allclose(nn.clip(a, 0.0, 1.0).data, [0.0, 0.5, 1.0])


def test_reductions_forward():
    a = nn.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert nn.tensor_sum(a).item() == 15.0
    np.testing.assert_allclose(nn.tensor_sum(a, axis=0).data, [3, 5, 7])
    np.testing.assert_allclose(nn.tensor_mean(a, axis=1).data, [1, 4])
    assert nn.tensor_sum(a, axis=1, keepdims=True).shape == (2, 1)


def test_concat_and_getitem_forward():
    a = nn.Tensor(np.ones((2, 3)))
    b = nn.Tensor(np.zeros((2, 2)))
    c = nn.concat([a, b], axis=1)
    assert c.shape == (2, 5)
    np.testing.assert_allclose(c.data[:, 3:], 0.0)
    np.testing.assert_allclose(a[1].data, np.ones(3))


def test_matmul_requires_2d():
    with pytest.raises(ValueError, match="2 dimensions"):
        nn.matmul(nn.Tensor(np.ones(3)), nn.Tensor(np.ones((3, 2))))


# -- finite-difference gradient checks ------------------------------------------


def test_grad_add_broadcast():
    rng = np.random.default_rng(10)
    a = _param(rng, (3, 1))
    b = _param(rng, (4,))
    w = rng.normal(size=(3, 4))
    err = check_gradients(lambda: nn.tensor_sum((a + b) * w), [a, b])
    assert err < TOL


def test_grad_sub_mul_div():
    rng = np.random.default_rng(11)
    a = _param(rng, (2, 3))
    b = _param(rng, (3,), offset=3.0)  # keep the divisor away from zero
    w = rng.normal(size=(2, 3))
    err = check_gradients(lambda: nn.tensor_sum((a - b) * a / b * w), [a, b])
    assert err < TOL


def test_grad_exp_log_sqrt_tanh_power():
    rng = np.random.default_rng(12)
    a = _param(rng, (5,), scale=0.3, offset=2.0)  # positive domain

    def loss():
        y = nn.exp(a) + nn.log(a) + nn.sqrt(a) + T.tanh(a) + a ** 1.5
        return nn.tensor_sum(y)

    assert check_gradients(loss, [a]) < TOL


def test_grad_clip_interior_and_blocked():
    a = nn.Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True, dtype=np.float64)
    with nn.Tape() as tape:
        y = nn.tensor_sum(nn.clip(a, 0.0, 1.0))
        tape.backward(y)
    np.testing.assert_allclose(a.grad, [0.0, 1.0, 0.0])


def test_grad_reshape_transpose_swapaxes():
    rng = np.random.default_rng(13)
    a = _param(rng, (2, 3, 4))
    w = rng.normal(size=(4, 3, 2))

    def loss():
        y = nn.reshape(nn.transpose(a, (2, 1, 0)), (4, 3, 2))
        y = T.swapaxes(y, 0, 2)  # back to (2, 3, 4)
        return nn.tensor_sum(y * a) + nn.tensor_sum(nn.transpose(a, (2, 1, 0)) * w)

    assert check_gradients(loss, [a]) < TOL


def test_grad_concat():
    rng = np.random.default_rng(14)
    a = _param(rng, (2, 3))
    b = _param(rng, (2, 2))
    w = rng.normal(size=(2, 5))
    err = check_gradients(lambda: nn.tensor_sum(nn.concat([a, b], axis=1) * w), [a, b])
    assert err < TOL


def test_grad_getitem_scatter_adds_repeats():
    a = nn.Tensor(np.arange(4.0), requires_grad=True, dtype=np.float64)
    idx = np.array([0, 0, 2])
    with nn.Tape() as tape:
        y = nn.tensor_sum(a[idx])
        tape.backward(y)
    np.testing.assert_allclose(a.grad, [2.0, 0.0, 1.0, 0.0])


def test_grad_gather_rows():
    rng = np.random.default_rng(15)
    a = _param(rng, (5, 3))
    rows = np.array([1, 1, 4, 0])
    w = rng.normal(size=(4, 3))
    err = check_gradients(lambda: nn.tensor_sum(nn.gather_rows(a, rows) * w), [a])
    assert err < TOL


def test_grad_sum_mean_axes():
    rng = np.random.default_rng(16)
    a = _param(rng, (3, 4, 2))
    w0 = rng.normal(size=(4, 2))
    w1 = rng.normal(size=(3, 1, 2))

    def loss():
        y = nn.tensor_sum(a, axis=0) * w0
        z = nn.tensor_mean(a, axis=1, keepdims=True) * w1
        return nn.tensor_sum(y) + nn.tensor_sum(z) + nn.tensor_mean(a)

    assert check_gradients(loss, [a]) < TOL


def test_grad_matmul_plain_and_broadcast():
    rng = np.random.default_rng(17)
    a = _param(rng, (2, 3, 4))
    b = _param(rng, (4, 5))  # broadcasts over the leading batch axis
    w = rng.normal(size=(2, 3, 5))
    err = check_gradients(lambda: nn.tensor_sum(nn.matmul(a, b) * w), [a, b])
    assert err < TOL


def test_grad_through_long_chain():
    rng = np.random.default_rng(18)
    a = _param(rng, (3, 3), scale=0.5)

    def loss():
        y = nn.matmul(a, a) + a * 2.0
        y = T.tanh(y)
        return nn.tensor_mean(y * y)

    assert check_gradients(loss, [a]) < TOL
