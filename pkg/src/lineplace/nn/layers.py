"""Parameterized layers: module registry, linear, conv, norm, attention."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, concat, reshape


def he_uniform(rng: np.random.Generator, shape, fan_in: int, alpha: float = 0.3, dtype=DEFAULT_DTYPE):
    """Kaiming-style uniform init matched to the leaky-relu gain."""
    gain = np.sqrt(2.0 / (1.0 + alpha * alpha))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class with automatic parameter/buffer/child registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value))

    def named_parameters(self, prefix: str = ""):
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = ""):
        out = {}
        for name in self._buffers:
            out[prefix + name] = getattr(self, name)
        for name, child in self._children.items():
            out.update(child.named_buffers(prefix + name + "."))
        return out

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for name, buf in self.named_buffers().items():
            state[name] = np.asarray(buf).copy()
        return state

    def load_state_dict(self, state, strict: bool = True):
        params = self.named_parameters()
        own = set(params) | set(self.named_buffers())
        if strict:
            missing = own - set(state)
            extra = set(state) - own
            if missing or extra:
                raise KeyError(f"state dict mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: {p.data.shape} vs {value.shape}")
                p.data = np.asarray(value, dtype=p.data.dtype)
            elif name in own:
                self._assign_buffer(name, value)
        return self

    def _assign_buffer(self, dotted: str, value):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part) if not part.isdigit() else obj[int(part)]
        object.__setattr__(obj, parts[-1], np.asarray(value))

    def astype(self, dtype):
        """Cast every parameter and buffer in place (float64 for grad checks)."""
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        for name, buf in self.named_buffers().items():
            self._assign_buffer(name, np.asarray(buf).astype(dtype))
        return self


class ModuleList:
    """Sequence of child modules that registers with the parent."""

    def __init__(self, modules=()):
        self._modules = list(modules)

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[i]

    def append(self, module):
        self._modules.append(module)

    def named_parameters(self, prefix: str = ""):
        out = {}
        for i, m in enumerate(self._modules):
            out.update(m.named_parameters(f"{prefix}{i}."))
        return out

    def named_buffers(self, prefix: str = ""):
        out = {}
        for i, m in enumerate(self._modules):
            out.update(m.named_buffers(f"{prefix}{i}."))
        return out

    def train(self, mode: bool = True):
        for m in self._modules:
            m.train(mode)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.w = Tensor(he_uniform(rng, (d_in, d_out), fan_in=d_in, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return F.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, dtype=DEFAULT_DTYPE):
        super().__init__()
        fan_in = kernel * kernel * c_in
        self.w = Tensor(he_uniform(rng, (kernel, kernel, c_in, c_out), fan_in=fan_in, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return F.conv2d(x, self.w, self.b, padding="same")


class BatchNorm1d(Module):
    """Row-wise batch norm with running statistics (momentum 0.9)."""

    def __init__(self, d: int, eps: float = 1e-5, momentum: float = 0.9, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(d, dtype=dtype))
        self.register_buffer("running_var", np.ones(d, dtype=dtype))

    def __call__(self, x, mask=None):
        if self.training:
            out, mean, var = F.batch_norm_train(x, self.gamma, self.beta, mask=mask, eps=self.eps)
            m = self.momentum
            object.__setattr__(self, "running_mean", (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype))
            object.__setattr__(self, "running_var", (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype))
            return out
        return F.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, eps=self.eps)


class FeedForward(Module):
    """Position-wise two-layer MLP with a leaky-relu hidden activation."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, alpha: float = 0.3, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.alpha = alpha
        self.fc1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(F.leaky_relu(self.fc1(x), self.alpha))


class MultiHeadSelfAttention(Module):
    """Mixed multi-head self-attention: dot-product and additive heads.

    Keys double as values in every head.  Heads are stored stacked on a
    leading axis so one broadcasted matmul evaluates all heads of a kind.
    """

    def __init__(
        self,
        d_model: int,
        n_dot: int,
        n_add: int,
        d_k: int,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        self.d_k = d_k
        self.n_dot = n_dot
        self.n_add = n_add
        if n_dot:
            self.dot_wq = Tensor(he_uniform(rng, (n_dot, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
            self.dot_wk = Tensor(he_uniform(rng, (n_dot, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
        if n_add:
            self.add_wq = Tensor(he_uniform(rng, (n_add, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
            self.add_wk = Tensor(he_uniform(rng, (n_add, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
            # shaped [h, 1, d_k, 1] so the leading axes broadcast against [B, h, N]
            self.add_w = Tensor(he_uniform(rng, (n_add, 1, d_k, 1), fan_in=d_k, dtype=dtype), requires_grad=True)
        self.proj = Linear((n_dot + n_add) * d_k, d_model, rng, dtype=dtype)

    def __call__(self, x, mask=None):
        """x: [N, d_model] or [B, N, d_model]; mask: matching [.., N] bool."""
        x = as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = F.expand_dims(x, 0)
            if mask is not None:
                mask = np.asarray(mask, dtype=bool)[None, :]
        xh = F.expand_dims(x, 1)  # [B, 1, N, d_model]
        n = x.shape[1]
        heads = []
        if self.n_dot:
            q = xh @ self.dot_wq  # [B, h, N, d_k]
            k = xh @ self.dot_wk
            heads.append(F.dot_attention(q, k, k, mask=None if mask is None else mask[:, None, :]))
        if self.n_add:
            q = xh @ self.add_wq
            k = xh @ self.add_wk
            hidden = F.tanh(F.expand_dims(q, -2) + F.expand_dims(k, -3))  # [B, h, N, N, d_k]
            scores = hidden @ self.add_w  # [B, h, N, N, 1]
            scores = reshape(scores, scores.shape[:-1])
            if mask is not None:
                scores = scores + Tensor(F._mask_bias(mask, scores.dtype)[:, None, None, :])
            weights = F.softmax(scores, axis=-1)
            heads.append(weights @ k)
        out = concat(heads, axis=1) if len(heads) > 1 else heads[0]  # [B, h_total, N, d_k]
        out = out.transpose((0, 2, 1, 3))  # [B, N, h_total, d_k]
        out = reshape(out, (out.shape[0], n, (self.n_dot + self.n_add) * self.d_k))
        out = self.proj(out)
        if squeeze:
            out = reshape(out, out.shape[1:])
        return out


class GlobalAttentionPool(Module):
    """Cross-attention from learned or generated queries onto a line set.

    Dot-product heads use per-head learned queries; additive heads likewise.
    When ``queries`` is passed to the call, those vectors replace the learned
    ones (used by the second pooling stage, which attends with generated
    queries), but the key projections stay per-head.
    """

    def __init__(
        self,
        d_model: int,
        n_dot: int,
        n_add: int,
        d_k: int,
        rng: np.random.Generator,
        learned_queries: bool = True,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        self.d_k = d_k
        self.n_dot = n_dot
        self.n_add = n_add
        if learned_queries:
            scale = 1.0 / np.sqrt(d_k)
            self.query = Tensor(
                (rng.standard_normal((n_dot + n_add, 1, d_k)) * scale).astype(dtype), requires_grad=True
            )
        else:
            self.query = None
        if n_dot:
            self.dot_wk = Tensor(he_uniform(rng, (n_dot, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
        if n_add:
            self.add_wk = Tensor(he_uniform(rng, (n_add, d_model, d_k), fan_in=d_model, dtype=dtype), requires_grad=True)
            self.add_w = Tensor(he_uniform(rng, (n_add, 1, d_k, 1), fan_in=d_k, dtype=dtype), requires_grad=True)

    def __call__(self, x, mask=None, queries=None):
        """x: [B, N, d_model]; mask: [B, N] bool; queries: [B, n_heads, d_k] or None.

        Returns [B, (n_dot + n_add) * d_k]: concatenated per-head readouts.
        """
        x = as_tensor(x)
        b, n, _ = x.shape
        h_total = self.n_dot + self.n_add
        if queries is None:
            if self.query is None:
                raise ValueError("this pool has no learned queries; pass explicit ones")
            q_all = self.query  # [h, 1, d_k]; broadcasts over the batch axis
        else:
            q_all = F.expand_dims(as_tensor(queries), -2)  # [B, h, 1, d_k]
        xh = F.expand_dims(x, 1)
        bias = None if mask is None else F._mask_bias(mask, x.dtype)[:, None, None, :]

        def head_queries(lo, hi):
            return q_all[lo:hi] if queries is None else q_all[:, lo:hi]

        outs = []
        if self.n_dot:
            k = xh @ self.dot_wk  # [B, h_dot, N, d_k]
            q = head_queries(0, self.n_dot)
            scores = (q @ F.swap_last(k)) * (1.0 / np.sqrt(self.d_k))  # [B, h_dot, 1, N]
            if bias is not None:
                scores = scores + Tensor(bias)
            w = F.softmax(scores, axis=-1)
            outs.append(w @ k)  # [B, h_dot, 1, d_k]
        if self.n_add:
            k = xh @ self.add_wk
            q = head_queries(self.n_dot, h_total)
            hidden = F.tanh(F.expand_dims(q, -2) + F.expand_dims(k, -3))  # [B, h, 1, N, d_k]
            scores = hidden @ self.add_w
            scores = reshape(scores, scores.shape[:-1])  # [B, h, 1, N]
            if bias is not None:
                scores = scores + Tensor(bias)
            w = F.softmax(scores, axis=-1)
            outs.append(w @ k)
        out = concat(outs, axis=1) if len(outs) > 1 else outs[0]  # [B, h_total, 1, d_k]
        return reshape(out, (b, h_total * self.d_k))


class EncoderLayer(Module):
    """Self-attention (optional) and feed-forward sublayers with residuals.

    Each sublayer output is combined as leaky_relu(x + sublayer(x)); batch
    norm after each residual is optional (the cluster network uses it, the
    descriptor network does not).
    """

    def __init__(
        self,
        d_model: int,
        n_dot: int,
        n_add: int,
        d_k: int,
        d_ff: int,
        rng: np.random.Generator,
        use_attention: bool = True,
        use_bn: bool = True,
        alpha: float = 0.3,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        self.alpha = alpha
        self.use_attention = use_attention
        if use_attention:
            self.attn = MultiHeadSelfAttention(d_model, n_dot, n_add, d_k, rng, dtype=dtype)
            self.bn_attn = BatchNorm1d(d_model, dtype=dtype) if use_bn else None
        self.ff = FeedForward(d_model, d_ff, rng, alpha=alpha, dtype=dtype)
        self.bn_ff = BatchNorm1d(d_model, dtype=dtype) if use_bn else None

    def __call__(self, x, mask=None):
        if self.use_attention:
            x = F.residual(x, self.attn(x, mask=mask), self.alpha)
            if self.bn_attn is not None:
                x = self.bn_attn(x, mask=mask)
        x = F.residual(x, self.ff(x), self.alpha)
        if self.bn_ff is not None:
            x = self.bn_ff(x, mask=mask)
        return x
