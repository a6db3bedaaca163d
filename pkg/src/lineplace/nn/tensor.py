"""Dense tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation executed while it is
active; ``Tape.backward`` replays the record in reverse to accumulate
gradients into each tensor's ``grad`` buffer.  Replaying the execution
order backwards is a valid reverse topological order, so every node is
visited exactly once.

Without an active tape nothing is recorded and the same functions act as
plain (cheap) numpy wrappers, which is what inference uses.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

# value added to masked attention scores; exp() underflows to exactly 0.0
MASK_SCORE = -1e30

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """A view of the same values that is cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered operation record for one reverse-mode pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, output: Tensor, seed=None):
        """Accumulate d(output)/d(leaf) into every recorded tensor's grad."""
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        self._used = True
        if seed is None:
            seed = np.ones_like(output.data)
        output.grad = np.asarray(seed, dtype=output.data.dtype)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.bwd(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = gi.astype(inp.data.dtype, copy=False)
                else:
                    inp.grad = inp.grad + gi
        self._nodes.clear()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


_KINK_TRACE = None


class KinkMarginTrace:
    """Collects how close piecewise-linear decisions come to flipping.

    A central finite difference with step h is only trustworthy when no
    leaky_relu or clip input sits within h of a breakpoint and no max-pool
    window has its top two candidates within h of each other; otherwise the
    probe flips a decision and measures the kink, not the derivative.  Run
    the forward once inside this context and require min_margin() to clear
    the probe step by a comfortable factor before comparing gradients
    numerically.
    """

    def __init__(self):
        self.margins: list[float] = []

    def __enter__(self):
        global _KINK_TRACE
        self._prev = _KINK_TRACE
        _KINK_TRACE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _KINK_TRACE
        _KINK_TRACE = self._prev
        return False

    def record(self, margin: float):
        self.margins.append(float(margin))

    def min_margin(self) -> float:
        return min(self.margins) if self.margins else np.inf


def kink_trace():
    return _KINK_TRACE


def _record(out: Tensor, inputs, bwd):
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, inputs, bwd))
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a, exponent: float):
    a = as_tensor(a)
    out = Tensor(a.data ** exponent)
    return _record(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def clip(a, lo: float, hi: float):
    """Clamp values; gradient passes only where the input was inside [lo, hi]."""
    a = as_tensor(a)
    if _KINK_TRACE is not None and a.data.size:
        d = np.abs(a.data - lo)
        _KINK_TRACE.record(min(d.min(), np.abs(a.data - hi).min()))
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def stop_gradient(a):
    return as_tensor(a).detach()


# -- shape manipulation -------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2))
    return _record(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), bwd)


def gather_rows(a, rows):
    """Select rows by integer index; scatter-adds the gradient back."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = Tensor(a.data[rows])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, g)
        return (ga,)

    return _record(out, (a,), bwd)


# -- reductions ----------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    """Matrix product with broadcasting over leading axes (operands must be >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)
