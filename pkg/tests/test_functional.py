"""Network operations: hand-computed forward oracles plus gradient checks.

Oracles: leaky_relu(-2) = -0.6 at alpha 0.3, softmax of equal logits is
uniform (stable at 1000), l2_normalize([3,4]) = [0.6,0.8], [[1,2]]@[[1],[1]]
= [[3]], residual(-1, 0) = -0.3, 2x2 maxpool of [[1,2],[3,4]] = 4.  Gradient
checks run in float64 at h = 1e-5 against central differences; kinked ops
use inputs bounded away from their breakpoints.
"""

from __future__ import annotations

import numpy as np
import pytest

from lineplace import nn
from lineplace.nn import functional as F
from lineplace.nn.gradcheck import check_gradients

TOL = 1e-4


def _param(rng, shape, scale=1.0, offset=0.0):
    return nn.Tensor(offset + scale * rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, min_abs=0.2):
    x = rng.normal(size=shape)
    return nn.Tensor(np.sign(x) * (np.abs(x) + min_abs), requires_grad=True, dtype=np.float64)


# -- leaky relu ------------------------------------------------------------------


def test_leaky_relu_values():
    y = F.leaky_relu(nn.Tensor(np.array([2.0, -2.0, 0.0])))
    np.testing.assert_allclose(y.data, [2.0, -0.6, 0.0])


def test_leaky_relu_slope_on_negative_side():
    # central difference of the scalar map at x = -1 equals the 0.3 slope
    h = 1e-5
    f = lambda v: float(F.leaky_relu(nn.Tensor(np.array([v]))).data[0])
    fd = (f(-1.0 + h) - f(-1.0 - h)) / (2 * h)
    assert abs(fd - 0.3) < 1e-9


def test_relu_is_zero_alpha():
    y = F.relu(nn.Tensor(np.array([2.0, -2.0])))
    np.testing.assert_allclose(y.data, [2.0, 0.0])


def test_grad_leaky_relu():
    x = _away_from_zero(np.random.default_rng(0), (4, 3))
    assert check_gradients(lambda: nn.tensor_sum(F.leaky_relu(x * x - 1.0)), [x]) < TOL


# -- softmax -----------------------------------------------------------------------


def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(F.softmax(nn.Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])


def test_softmax_stable_at_large_logits():
    y = F.softmax(nn.Tensor(np.array([1000.0, 1000.0]))).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    y = F.softmax(nn.Tensor(rng.normal(size=(5, 7)))).data
    np.testing.assert_allclose(y.sum(axis=1), np.ones(5), atol=1e-6)


def test_grad_softmax_jacobian():
    rng = np.random.default_rng(2)
    x = _param(rng, (3, 5))
    w = rng.normal(size=(3, 5))
    err = check_gradients(lambda: nn.tensor_sum(F.softmax(x) * w), [x])
    assert err < 1e-6


# -- l2 normalize -------------------------------------------------------------------


def test_l2_normalize_345():
    np.testing.assert_allclose(F.l2_normalize(nn.Tensor(np.array([3.0, 4.0]))).data, [0.6, 0.8])


def test_l2_normalize_unit_identity():
    v = np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(F.l2_normalize(nn.Tensor(v)).data, v, atol=1e-7)


def test_l2_normalize_rejects_zero():
    with pytest.raises(ValueError, match="near-zero"):
        F.l2_normalize(nn.Tensor(np.zeros(3)))


def test_grad_l2_normalize():
    rng = np.random.default_rng(3)
    x = _param(rng, (2, 4), offset=0.0)
    w = rng.normal(size=(2, 4))
    assert check_gradients(lambda: nn.tensor_sum(F.l2_normalize(x) * w), [x]) < TOL


# -- linear -------------------------------------------------------------------------


def test_linear_identity():
    x = nn.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    y = F.linear(x, nn.Tensor(np.eye(3)), nn.Tensor(np.zeros(3)))
    np.testing.assert_allclose(y.data, x.data)


def test_linear_hand_example():
    y = F.linear(nn.Tensor(np.array([[1.0, 2.0]])), nn.Tensor(np.array([[1.0], [1.0]])),
                 nn.Tensor(np.array([0.0])))
    np.testing.assert_allclose(y.data, [[3.0]])


def test_grad_linear():
    rng = np.random.default_rng(4)
    x = _param(rng, (3, 4))
    w = _param(rng, (4, 2))
    b = _param(rng, (2,))
    c = rng.normal(size=(3, 2))
    err = check_gradients(lambda: nn.tensor_sum(F.linear(x, w, b) * c), [x, w, b])
    assert err < 1e-6


# -- residual ------------------------------------------------------------------------


def test_residual_identity_on_positive():
    x = nn.Tensor(np.array([1.0, 2.0]))
    np.testing.assert_allclose(F.residual(x, nn.Tensor(np.zeros(2))).data, x.data)


def test_residual_negative_leak():
    y = F.residual(nn.Tensor(np.array([-1.0])), nn.Tensor(np.array([0.0])))
    np.testing.assert_allclose(y.data, [-0.3])


def test_grad_residual_both_paths():
    rng = np.random.default_rng(5)
    x = _param(rng, (3,), offset=2.0)  # keep the sum away from the kink
    s = _param(rng, (3,), scale=0.1)
    err = check_gradients(lambda: nn.tensor_sum(F.residual(x, s * x)), [x, s])
    assert err < TOL


# -- attention ------------------------------------------------------------------------


def test_dot_attention_single_valid_key():
    rng = np.random.default_rng(6)
    q = nn.Tensor(rng.normal(size=(2, 4)))
    k = nn.Tensor(rng.normal(size=(3, 4)))
    v = nn.Tensor(rng.normal(size=(3, 5)))
    mask = np.array([False, True, False])
    out = F.dot_attention(q, k, v, mask=mask)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data[1], (2, 5)), atol=1e-7)


def test_dot_attention_identical_keys_share_value():
    k = nn.Tensor(np.ones((4, 3)))
    v = nn.Tensor(np.broadcast_to(np.array([2.0, -1.0]), (4, 2)).copy())
    q = nn.Tensor(np.random.default_rng(7).normal(size=(2, 3)))
    out = F.dot_attention(q, k, v)
    np.testing.assert_allclose(out.data, np.broadcast_to([2.0, -1.0], (2, 2)), atol=1e-7)


def test_dot_attention_ignores_masked_content():
    rng = np.random.default_rng(8)
    q = nn.Tensor(rng.normal(size=(2, 4)))
    k = rng.normal(size=(5, 4))
    v = rng.normal(size=(5, 3))
    mask = np.array([True, True, False, True, False])
    base = F.dot_attention(q, nn.Tensor(k), nn.Tensor(v), mask=mask).data
    k2, v2 = k.copy(), v.copy()
    k2[~mask] = 1e3
    v2[~mask] = -1e3
    poked = F.dot_attention(q, nn.Tensor(k2), nn.Tensor(v2), mask=mask).data
    np.testing.assert_array_equal(base, poked)


def test_dot_attention_all_masked_rejected():
    q = nn.Tensor(np.zeros((1, 2)))
    k = nn.Tensor(np.zeros((3, 2)))
    v = nn.Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError, match="unmasked"):
        F.dot_attention(q, k, v, mask=np.zeros(3, dtype=bool))


def test_grad_dot_attention():
    rng = np.random.default_rng(9)
    q = _param(rng, (3, 4))
    k = _param(rng, (3, 4))
    v = _param(rng, (3, 4))
    w = rng.normal(size=(3, 4))
    err = check_gradients(lambda: nn.tensor_sum(F.dot_attention(q, k, v) * w), [q, k, v])
    assert err < 1e-5


def test_additive_attention_single_key():
    rng = np.random.default_rng(10)
    q = nn.Tensor(rng.normal(size=(2, 3)))
    k = nn.Tensor(rng.normal(size=(1, 3)))
    v = nn.Tensor(rng.normal(size=(1, 4)))
    w_q = nn.Tensor(rng.normal(size=(3, 5)))
    w_k = nn.Tensor(rng.normal(size=(3, 5)))
    w = nn.Tensor(rng.normal(size=(5,)))
    out = F.additive_attention(q, k, v, w_q, w_k, w)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data[0], (2, 4)), atol=1e-7)


def test_additive_attention_key_permutation_symmetry():
    rng = np.random.default_rng(11)
    q = nn.Tensor(rng.normal(size=(2, 3)))
    k = rng.normal(size=(5, 3))
    v = rng.normal(size=(5, 4))
    w_q = nn.Tensor(rng.normal(size=(3, 6)))
    w_k = nn.Tensor(rng.normal(size=(3, 6)))
    w = nn.Tensor(rng.normal(size=(6,)))
    perm = np.array([3, 0, 4, 1, 2])
    base = F.additive_attention(q, nn.Tensor(k), nn.Tensor(v), w_q, w_k, w).data
    permuted = F.additive_attention(q, nn.Tensor(k[perm]), nn.Tensor(v[perm]), w_q, w_k, w).data
    np.testing.assert_allclose(base, permuted, atol=1e-12)


def test_grad_additive_attention():
    rng = np.random.default_rng(12)
    q = _param(rng, (2, 3))
    k = _param(rng, (4, 3))
    v = _param(rng, (4, 2))
    w_q = _param(rng, (3, 5))
    w_k = _param(rng, (3, 5))
    w = _param(rng, (5,))
    c = rng.normal(size=(2, 2))
    err = check_gradients(
        lambda: nn.tensor_sum(F.additive_attention(q, k, v, w_q, w_k, w) * c),
        [q, k, v, w_q, w_k, w],
    )
    assert err < 1e-5


# -- convolution and pooling ------------------------------------------------------------


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(13)
    x = nn.Tensor(rng.normal(size=(2, 5, 6, 1)))
    w = nn.Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_allclose(F.conv2d(x, w).data, x.data, atol=1e-12)


def test_conv2d_same_and_valid_shapes():
    x = nn.Tensor(np.zeros((1, 8, 10, 3)))
    w = nn.Tensor(np.zeros((3, 3, 3, 4)))
    assert F.conv2d(x, w, padding="same").shape == (1, 8, 10, 4)
    assert F.conv2d(x, w, padding="valid").shape == (1, 6, 8, 4)


def test_conv2d_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        F.conv2d(nn.Tensor(np.zeros((1, 4, 4, 2))), nn.Tensor(np.zeros((3, 3, 3, 4))))


def test_grad_conv2d():
    rng = np.random.default_rng(14)
    x = _param(rng, (2, 5, 6, 2))
    w = _param(rng, (3, 3, 2, 3))
    b = _param(rng, (3,))
    c = rng.normal(size=(2, 5, 6, 3))
    err = check_gradients(lambda: nn.tensor_sum(F.conv2d(x, w, b) * c), [x, w, b])
    assert err < TOL


def test_maxpool_hand_example():
    x = nn.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert F.maxpool2d(x, 2).data.reshape(()) == 4.0


def test_maxpool_rejects_indivisible():
    with pytest.raises(ValueError, match="not divisible"):
        F.maxpool2d(nn.Tensor(np.zeros((1, 5, 4, 1))), 2)


def test_grad_maxpool_routes_to_max():
    # distinct window entries keep the argmax stable under the probe step
    rng = np.random.default_rng(15)
    base = rng.permutation(4 * 6 * 2).astype(np.float64).reshape(1, 4, 6, 2)
    x = nn.Tensor(base, requires_grad=True, dtype=np.float64)
    c = rng.normal(size=(1, 2, 3, 2))
    with nn.KinkMarginTrace() as trace:
        F.maxpool2d(x, 2)
    assert trace.min_margin() > 1e-2
    err = check_gradients(lambda: nn.tensor_sum(F.maxpool2d(x, 2) * c), [x])
    assert err < TOL


# -- batch norm ---------------------------------------------------------------------------


def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(16)
    x = nn.Tensor(5.0 + 2.0 * rng.normal(size=(64, 3)))
    gamma = nn.Tensor(np.ones(3))
    beta = nn.Tensor(np.zeros(3))
    out, mean, var = F.batch_norm_train(x, gamma, beta)
    assert abs(out.data.mean(axis=0)).max() < 1e-6
    np.testing.assert_allclose(out.data.var(axis=0), np.ones(3), atol=1e-4)
    np.testing.assert_allclose(mean, x.data.mean(axis=0), atol=1e-9)


def test_batch_norm_affine_params():
    rng = np.random.default_rng(17)
    x = nn.Tensor(rng.normal(size=(128, 2)))
    out, _, _ = F.batch_norm_train(x, nn.Tensor(2.0 * np.ones(2)), nn.Tensor(3.0 * np.ones(2)))
    np.testing.assert_allclose(out.data.mean(axis=0), 3.0 * np.ones(2), atol=1e-6)
    np.testing.assert_allclose(out.data.std(axis=0), 2.0 * np.ones(2), atol=1e-3)


def test_batch_norm_needs_two_rows():
    with pytest.raises(ValueError, match="at least 2 rows"):
        F.batch_norm_train(nn.Tensor(np.ones((1, 3))), nn.Tensor(np.ones(3)), nn.Tensor(np.zeros(3)))


def test_batch_norm_mask_excludes_rows():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(6, 3))
    mask = np.array([True, True, True, True, False, False])
    out_m, mean_m, _ = F.batch_norm_train(nn.Tensor(x), nn.Tensor(np.ones(3)), nn.Tensor(np.zeros(3)), mask=mask)
    out_s, mean_s, _ = F.batch_norm_train(nn.Tensor(x[:4]), nn.Tensor(np.ones(3)), nn.Tensor(np.zeros(3)))
    np.testing.assert_allclose(mean_m, mean_s, atol=1e-12)
    np.testing.assert_allclose(out_m.data[:4], out_s.data, atol=1e-12)


def test_grad_batch_norm_4x3():
    rng = np.random.default_rng(19)
    x = _param(rng, (4, 3))
    gamma = _param(rng, (3,), offset=1.0)
    beta = _param(rng, (3,))
    c = rng.normal(size=(4, 3))
    err = check_gradients(lambda: nn.tensor_sum(F.batch_norm_train(x, gamma, beta)[0] * c),
                          [x, gamma, beta])
    assert err < 1e-5


def test_grad_batch_norm_masked():
    # gradients are only defined for losses that ignore padded rows, so the
    # loss weights at masked rows must be zero
    rng = np.random.default_rng(20)
    x = _param(rng, (5, 2))
    gamma = _param(rng, (2,), offset=1.0)
    beta = _param(rng, (2,))
    mask = np.array([True, False, True, True, False])
    c = rng.normal(size=(5, 2)) * mask[:, None]
    err = check_gradients(
        lambda: nn.tensor_sum(F.batch_norm_train(x, gamma, beta, mask=mask)[0] * c),
        [x, gamma, beta],
    )
    assert err < 1e-5


def test_batch_norm_eval_deterministic():
    rng = np.random.default_rng(21)
    x = nn.Tensor(rng.normal(size=(3, 4)))
    rm, rv = rng.normal(size=4), np.abs(rng.normal(size=4)) + 0.5
    g, b = nn.Tensor(np.ones(4)), nn.Tensor(np.zeros(4))
    a = F.batch_norm_eval(x, g, b, rm, rv).data
    np.testing.assert_array_equal(a, F.batch_norm_eval(x, g, b, rm, rv).data)
    expected = (x.data - rm) / np.sqrt(rv + 1e-5)
    np.testing.assert_allclose(a, expected, atol=1e-7)
