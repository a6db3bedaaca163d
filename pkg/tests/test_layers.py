"""Layer modules: registration, state round trips, attention set behaviour.

Checked properties: parameter auto-registration with dotted names, state
dict save/load bit-exactness and strict-mode errors, running-statistic
updates at momentum 0.9, masked rows never influencing valid-row outputs,
pooled readouts invariant to line order, and end-to-end gradients of a full
encoder layer against central finite differences in float64.
"""

from __future__ import annotations

import numpy as np
import pytest

from lineplace import nn
from lineplace.nn import functional as F
from lineplace.nn.gradcheck import check_gradients
from lineplace.nn.layers import (
    BatchNorm1d,
    Conv2d,
    EncoderLayer,
    FeedForward,
    GlobalAttentionPool,
    Linear,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    he_uniform,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- registration and state --------------------------------------------------------


def test_parameter_registration_dotted_names():
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.fc = Linear(3, 4, _rng())
            self.layers = ModuleList([Linear(4, 4, _rng(i)) for i in range(2)])
            self.scale = nn.Tensor(np.ones(1), requires_grad=True)

    names = set(Net().named_parameters())
    assert names == {"fc.w", "fc.b", "layers.0.w", "layers.0.b", "layers.1.w", "layers.1.b", "scale"}


def test_linear_no_bias_registers_single_param():
    lin = Linear(3, 2, _rng(), bias=False)
    assert set(lin.named_parameters()) == {"w"}
    assert lin.b is None


def test_state_dict_round_trip_restores_forward():
    x = _rng(1).normal(size=(5, 6)).astype(np.float32)
    net = MultiHeadSelfAttention(6, 2, 1, 4, _rng(2))
    want = net(x).data.copy()
    state = net.state_dict()
    for p in net.parameters():
        p.data = p.data + 1.0
    assert not np.allclose(net(x).data, want)
    net.load_state_dict(state)
    np.testing.assert_array_equal(net(x).data, want)


def test_state_dict_strict_rejects_mismatch():
    net = Linear(2, 2, _rng())
    state = net.state_dict()
    state["ghost"] = np.zeros(2)
    with pytest.raises(KeyError, match="unexpected"):
        net.load_state_dict(state)
    with pytest.raises(KeyError, match="missing"):
        net.load_state_dict({"w": np.zeros((2, 2))})


def test_state_dict_shape_mismatch():
    net = Linear(2, 2, _rng())
    bad = {"w": np.zeros((3, 3)), "b": np.zeros(2)}
    with pytest.raises(ValueError, match="shape mismatch"):
        net.load_state_dict(bad)


def test_state_dict_includes_buffers():
    bn = BatchNorm1d(3)
    bn(nn.Tensor(_rng(3).normal(size=(8, 3))))
    state = bn.state_dict()
    assert "running_mean" in state and "running_var" in state
    fresh = BatchNorm1d(3)
    fresh.load_state_dict(state)
    np.testing.assert_array_equal(fresh.running_mean, bn.running_mean)


def test_astype_converts_params_and_buffers():
    bn = BatchNorm1d(3)
    bn.astype(np.float64)
    assert bn.gamma.data.dtype == np.float64
    assert bn.running_mean.dtype == np.float64


def test_train_eval_propagates_to_children():
    layer = EncoderLayer(4, 1, 1, 2, 8, _rng(4))
    layer.eval()
    assert not layer.training and not layer.ff.training and not layer.bn_ff.training
    layer.train()
    assert layer.training and layer.attn.training


def test_zero_grad_clears():
    lin = Linear(2, 2, _rng())
    with nn.Tape() as tape:
        loss = nn.tensor_sum(lin(nn.Tensor(np.ones((3, 2), np.float32))))
        tape.backward(loss)
    assert lin.w.grad is not None
    lin.zero_grad()
    assert lin.w.grad is None


# -- init ---------------------------------------------------------------------------


def test_he_uniform_bound():
    fan_in = 50
    bound = np.sqrt(2.0 / 1.09) * np.sqrt(3.0 / fan_in)
    draws = he_uniform(_rng(5), (400, fan_in), fan_in=fan_in)
    assert np.abs(draws).max() <= bound
    assert np.abs(draws).max() > 0.95 * bound  # actually fills the interval


# -- batch norm layer ---------------------------------------------------------------


def test_batch_norm_running_stats_momentum():
    bn = BatchNorm1d(2)
    x = _rng(6).normal(size=(16, 2)) + 3.0
    bn(nn.Tensor(x))
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * x.var(axis=0), atol=1e-6)


def test_batch_norm_eval_uses_running_stats():
    bn = BatchNorm1d(2)
    rng = _rng(7)
    for _ in range(200):
        bn(nn.Tensor(rng.normal(size=(32, 2)) * 2.0 + 1.0))
    bn.eval()
    out = bn(nn.Tensor(rng.normal(size=(500, 2)) * 2.0 + 1.0)).data
    assert abs(out.mean()) < 0.2
    assert abs(out.std() - 1.0) < 0.2


# -- feed forward -------------------------------------------------------------------


def test_feed_forward_positionwise():
    ff = FeedForward(3, 8, _rng(8))
    x = _rng(9).normal(size=(4, 3)).astype(np.float32)
    full = ff(nn.Tensor(x)).data
    rows = np.stack([ff(nn.Tensor(x[i : i + 1])).data[0] for i in range(4)])
    np.testing.assert_allclose(full, rows, atol=1e-6)


# -- self attention -----------------------------------------------------------------


def test_self_attention_2d_3d_parity():
    net = MultiHeadSelfAttention(5, 2, 2, 3, _rng(10))
    x = _rng(11).normal(size=(6, 5)).astype(np.float32)
    flat = net(nn.Tensor(x)).data
    batched = net(nn.Tensor(x[None])).data
    np.testing.assert_array_equal(flat, batched[0])


def test_self_attention_masked_rows_do_not_leak():
    net = MultiHeadSelfAttention(4, 1, 1, 3, _rng(12))
    rng = _rng(13)
    x = rng.normal(size=(7, 4)).astype(np.float32)
    mask = np.array([True, True, False, True, False, True, True])
    base = net(nn.Tensor(x), mask=mask).data
    poked = x.copy()
    poked[~mask] += rng.normal(size=(2, 4)).astype(np.float32) * 10
    again = net(nn.Tensor(poked), mask=mask).data
    np.testing.assert_array_equal(base[mask], again[mask])


def test_self_attention_batch_mask_shapes():
    net = MultiHeadSelfAttention(4, 2, 0, 3, _rng(14))
    x = _rng(15).normal(size=(2, 5, 4)).astype(np.float32)
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 3:] = False
    out = net(nn.Tensor(x), mask=mask)
    assert out.shape == (2, 5, 4)


def test_grad_self_attention():
    net = MultiHeadSelfAttention(4, 1, 1, 3, _rng(16)).astype(np.float64)
    rng = _rng(17)
    x = nn.Tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    c = rng.normal(size=(5, 4))
    params = [x] + net.parameters()
    err = check_gradients(lambda: nn.tensor_sum(net(x) * c), params)
    assert err < 1e-4


# -- global attention pool ----------------------------------------------------------


def test_pool_output_shape_and_perm_invariance():
    pool = GlobalAttentionPool(5, 2, 2, 3, _rng(18)).astype(np.float64)
    rng = _rng(19)
    x = rng.normal(size=(2, 6, 5))
    perm = rng.permutation(6)
    out = pool(nn.Tensor(x))
    assert out.shape == (2, 12)
    out_p = pool(nn.Tensor(x[:, perm]))
    np.testing.assert_allclose(out.data, out_p.data, atol=1e-9)


def test_pool_mask_excludes_lines():
    pool = GlobalAttentionPool(4, 1, 1, 3, _rng(20)).astype(np.float64)
    rng = _rng(21)
    x = rng.normal(size=(1, 5, 4))
    mask = np.array([[True, True, True, False, False]])
    base = pool(nn.Tensor(x), mask=mask).data
    poked = x.copy()
    poked[0, 3:] = 99.0
    np.testing.assert_array_equal(pool(nn.Tensor(poked), mask=mask).data, base)


def test_pool_generated_queries_path():
    pool = GlobalAttentionPool(4, 1, 2, 3, _rng(22), learned_queries=False)
    x = nn.Tensor(_rng(23).normal(size=(2, 5, 4)).astype(np.float32))
    q = nn.Tensor(_rng(24).normal(size=(2, 3, 3)).astype(np.float32))
    assert pool(x, queries=q).shape == (2, 9)
    with pytest.raises(ValueError, match="no learned queries"):
        pool(x)


def test_grad_pool_learned_queries():
    pool = GlobalAttentionPool(4, 1, 1, 3, _rng(25)).astype(np.float64)
    rng = _rng(26)
    x = nn.Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True, dtype=np.float64)
    c = rng.normal(size=(2, 6))
    params = [x] + pool.parameters()
    err = check_gradients(lambda: nn.tensor_sum(pool(x) * c), params)
    assert err < 1e-4


# -- encoder layer ------------------------------------------------------------------


def test_encoder_layer_no_attention_rows_independent():
    layer = EncoderLayer(4, 1, 1, 2, 8, _rng(27), use_attention=False, use_bn=False)
    rng = _rng(28)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    base = layer(nn.Tensor(x)).data
    poked = x.copy()
    poked[2] += 5.0
    again = layer(nn.Tensor(poked)).data
    changed = np.any(base != again, axis=1)
    np.testing.assert_array_equal(changed, [False, False, True, False, False])


def test_encoder_layer_with_attention_mixes_rows():
    layer = EncoderLayer(4, 1, 1, 2, 8, _rng(29), use_bn=False)
    rng = _rng(30)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    base = layer(nn.Tensor(x)).data
    poked = x.copy()
    poked[2] += 5.0
    again = layer(nn.Tensor(poked)).data
    assert np.any(base[0] != again[0])  # row 0 sees row 2 through attention


def test_grad_encoder_layer_full():
    # kink-aware: assert every recorded branch is far from its breakpoint
    layer = EncoderLayer(3, 1, 1, 2, 6, _rng(31)).astype(np.float64)
    rng = _rng(32)
    x = nn.Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)
    c = rng.normal(size=(4, 3))
    with nn.KinkMarginTrace() as trace:
        layer(x)
    assert trace.min_margin() > 1e-3
    params = [x] + layer.parameters()
    err = check_gradients(lambda: nn.tensor_sum(layer(x) * c), params)
    assert err < 1e-4
