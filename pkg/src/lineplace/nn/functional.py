"""Fused neural-network operations on top of the tape.

Each function here computes its forward value in plain numpy and registers
a single hand-derived backward closure, which keeps tapes short and avoids
numerically fragile compositions (softmax, batch norm, convolution).
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    MASK_SCORE,
    Tensor,
    _record,
    _unbroadcast,
    as_tensor,
    concat,
    kink_trace,
    matmul,
    reshape,
    tanh,
)


def leaky_relu(x, alpha: float = 0.3):
    """y = x for x >= 0, alpha * x otherwise."""
    x = as_tensor(x)
    trace = kink_trace()
    if trace is not None and x.data.size:
        trace.record(np.abs(x.data).min())
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    out = Tensor(x.data * slope)
    return _record(out, (x,), lambda g: (g * slope,))


def relu(x):
    return leaky_relu(x, alpha=0.0)


def softmax(x, axis: int = -1):
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (x,), bwd)


def l2_normalize(x, axis: int = -1, min_norm: float = 1e-12):
    """Scale vectors along ``axis`` to unit Euclidean norm.

    Raises ValueError when any input vector has norm <= min_norm, because a
    normalized direction is undefined there.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= min_norm):
        raise ValueError("cannot l2-normalize a vector with near-zero norm")
    y = x.data / norm
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _record(out, (x,), bwd)


def linear(x, w, b=None):
    """x @ w (+ b) for row-major inputs of shape [..., d_in]."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def residual(x, sublayer_out, alpha: float = 0.3):
    """Residual combination y = leaky_relu(x + sublayer_out)."""
    return leaky_relu(x + sublayer_out, alpha=alpha)


# -- attention -------------------------------------------------------------


def _mask_bias(mask, dtype):
    """Additive score bias: 0 where mask is True, a large negative value otherwise."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention requires at least one unmasked key")
    return np.where(mask, 0.0, MASK_SCORE).astype(dtype)


def dot_attention(q, k, v, mask=None):
    """Scaled dot-product attention.

    q: [..., Nq, d_k], k: [..., Nk, d_k], v: [..., Nk, d_v];
    mask is a boolean [..., Nk] key-validity array (True = attend).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d_k = q.shape[-1]
    scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(d_k))
    if mask is not None:
        bias = _mask_bias(mask, scores.dtype)
        scores = scores + Tensor(bias[..., None, :])
    weights = softmax(scores, axis=-1)
    return matmul(weights, v)


def additive_attention_scores(q, k, w_q, w_k, w):
    """Unscaled additive scores s[i, j] = w . tanh(q[i] @ w_q + k[j] @ w_k)."""
    q, k = as_tensor(q), as_tensor(k)
    a = matmul(q, w_q)  # [..., Nq, d_q]
    b = matmul(k, w_k)  # [..., Nk, d_q]
    hidden = tanh(expand_dims(a, -2) + expand_dims(b, -3))  # [..., Nq, Nk, d_q]
    w = as_tensor(w)
    w_col = reshape(w, w.shape + (1,)) if w.ndim >= 1 else w
    scores = matmul(hidden, w_col)  # [..., Nq, Nk, 1]
    return reshape(scores, scores.shape[:-1])


def additive_attention(q, k, v, w_q, w_k, w, mask=None):
    """Additive (Bahdanau-style) attention over row-major q/k/v."""
    scores = additive_attention_scores(q, k, w_q, w_k, w)
    if mask is not None:
        bias = _mask_bias(mask, scores.dtype)
        scores = scores + Tensor(bias[..., None, :])
    weights = softmax(scores, axis=-1)
    return matmul(weights, as_tensor(v))


def expand_dims(x, axis: int):
    x = as_tensor(x)
    shape = list(x.shape)
    if axis < 0:
        axis = len(shape) + 1 + axis
    shape.insert(axis, 1)
    return reshape(x, tuple(shape))


def swap_last(x):
    """Transpose the trailing two axes."""
    from .tensor import swapaxes

    return swapaxes(x, -1, -2)


# -- convolution and pooling ----------------------------------------------


def conv2d(x, w, b=None, padding: str = "same"):
    """2-D convolution, NHWC layout, stride 1.

    x: [N, H, W, C_in], w: [kh, kw, C_in, C_out].  'same' zero-padding keeps
    the spatial size; 'valid' shrinks it by the kernel extent.
    """
    x, w = as_tensor(x), as_tensor(w)
    if b is not None:
        b = as_tensor(b)
    kh, kw, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]}, kernel {c_in}")
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        pads = ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0))
    elif padding == "valid":
        ph = pw = 0
        pads = ((0, 0), (0, 0), (0, 0), (0, 0))
    else:
        raise ValueError(f"unknown padding {padding!r}")

    padded = any(lo or hi for lo, hi in pads)
    xp = np.pad(x.data, pads) if padded else x.data
    n, hp, wp, _ = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # patches: [N, oh, ow, C_in, kh, kw] -> contract with w over (kh, kw, C_in)
    y = np.tensordot(patches, w.data, axes=([4, 5, 3], [0, 1, 2]))
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gw = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))  # [C_in, kh, kw, C_out]
        gw = np.transpose(gw, (1, 2, 0, 3))
        gb = g.sum(axis=(0, 1, 2)) if b is not None else None
        gxp = np.zeros(xp.shape, dtype=np.result_type(g.dtype, w.data.dtype))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + oh, j : j + ow, :] += np.matmul(g, w.data[i, j].T)
        gx = gxp[:, ph : ph + x.shape[1], pw : pw + x.shape[2], :] if padded else gxp
        if b is not None:
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def maxpool2d(x, size: int):
    """Non-overlapping max pooling over [N, H, W, C]; H and W must divide ``size``.

    The gradient routes to the first maximal element of each window (row-major
    order inside the window), so ties break deterministically.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: spatial dims {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    windows = x.data.reshape(n, oh, size, ow, size, c).transpose(0, 1, 3, 5, 2, 4)
    flat = windows.reshape(n, oh, ow, c, size * size)
    trace = kink_trace()
    if trace is not None and flat.size and flat.shape[-1] > 1:
        top2 = np.partition(flat, flat.shape[-1] - 2, axis=-1)
        trace.record((top2[..., -1] - top2[..., -2]).min())
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y)

    def bwd(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, oh, ow, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return (gx.reshape(n, h, w, c),)

    return _record(out, (x,), bwd)


# -- batch normalization -----------------------------------------------------


def batch_norm_train(x, gamma, beta, mask=None, eps: float = 1e-5):
    """Batch normalization in training mode over rows of x [N, d].

    Statistics are computed over rows where ``mask`` is True (all rows when
    mask is None).  Returns (out, batch_mean, batch_var); the caller owns the
    running-average update.  Requires at least 2 contributing rows.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mask is None:
        valid = np.ones(x.shape[0], dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid < 2:
        raise ValueError(f"batch norm needs at least 2 rows to estimate statistics, got {n_valid}")
    xv = x.data[valid]
    mean = xv.mean(axis=0)
    var = xv.var(axis=0)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivstd
    out = Tensor(xhat * gamma.data + beta.data)
    mcol = valid[:, None].astype(x.dtype)

    def bwd(g):
        gxhat = g * gamma.data
        gm = gxhat * mcol  # statistic terms only see contributing rows
        xc = x.data - mean
        gvar = (gm * xc).sum(axis=0) * (-0.5) * ivstd ** 3
        gmean = -(gm.sum(axis=0)) * ivstd + gvar * (-2.0 / n_valid) * (xc * mcol).sum(axis=0)
        gx = gxhat * ivstd + mcol * (gvar * 2.0 * xc + gmean) / n_valid
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        return gx, ggamma, gbeta

    out = _record(out, (x, gamma, beta), bwd)
    return out, mean, var


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    """Batch normalization with frozen statistics."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ivstd = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * ivstd
    out = Tensor((x.data - running_mean) * scale + beta.data)

    def bwd(g):
        gx = g * scale
        ggamma = (g * (x.data - running_mean) * ivstd).sum(axis=0)
        gbeta = g.sum(axis=0)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)
