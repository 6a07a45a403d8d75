"""Dense float tensors with reverse-mode gradients.

Every differentiable operation records its inputs and a gradient closure on
the produced tensor.  ``Tensor.backward()`` topologically sorts the recorded
graph from the loss and runs each closure exactly once, accumulating into
``.grad`` buffers.  Storage is float32 by default; float64 arrays are kept
as float64 so oracle code can run the same formulas at higher precision.
Any operation that produces a non-finite value raises ``NumericError``
immediately instead of letting NaNs propagate.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class NumericError(RuntimeError):
    """A committed operation produced NaN or Inf."""


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by '{op}'")


def _unbroadcast(g, shape):
    """Sum a gradient over axes that broadcasting introduced or stretched."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)):
            # float64 arrays stay float64 so oracles can rerun at high precision
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flag})"

    def item(self):
        return float(self.data)

    def detach(self):
        """Same storage, no graph edge, no gradient."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- reverse pass ----

    def backward(self):
        """Seed d(self)/d(self)=1 and run every recorded closure once.

        Only scalar losses are accepted.  Gradients flowing through interior
        nodes live in a per-pass map; only leaf tensors keep a persistent
        ``.grad``, and repeated calls accumulate into it.
        """
        global _FLOW
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = _toposort(self)
        _FLOW = {id(self): np.ones_like(self.data)}
        try:
            for node in reversed(order):
                g = _FLOW.pop(id(node), None)
                if g is None:
                    continue
                if node._grad_fn is not None:
                    node._grad_fn(g)
                elif node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
        finally:
            _FLOW = None

    # ---- arithmetic ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- shaping ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    # ---- elementwise / reductions ----

    def relu(self):
        return relu(self)

    def relu6(self):
        return relu6(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


_FLOW = None


def _result(data, parents, grad_fn, op):
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accum(t, g):
    """Route a gradient contribution to ``t`` within the active reverse pass."""
    g = _unbroadcast(np.asarray(g), t.data.shape).astype(t.data.dtype, copy=False)
    key = id(t)
    cur = _FLOW.get(key)
    _FLOW[key] = g if cur is None else cur + g


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
    return order


# ---- primitive operations ----


def add(a, b):
    a = _coerce(a, like=b) if not isinstance(a, Tensor) else a
    b = _coerce(b, like=a)
    out = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(out, (a, b), grad_fn, "add")


def sub(a, b):
    a = _coerce(a, like=b) if not isinstance(a, Tensor) else a
    b = _coerce(b, like=a)
    out = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _result(out, (a, b), grad_fn, "sub")


def mul(a, b):
    a = _coerce(a, like=b) if not isinstance(a, Tensor) else a
    b = _coerce(b, like=a)
    out = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _result(out, (a, b), grad_fn, "mul")


def div(a, b):
    a = _coerce(a, like=b) if not isinstance(a, Tensor) else a
    b = _coerce(b, like=a)
    # non-finite results raise NumericError below; numpy's warning is redundant
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g / b.data)
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    return _result(out, (a, b), grad_fn, "div")


def neg(a):
    def grad_fn(g):
        if a.requires_grad:
            _accum(a, -g)

    return _result(-a.data, (a,), grad_fn, "neg")


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), grad_fn, "matmul")


def relu(a):
    mask = a.data > 0

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _result(np.where(mask, a.data, 0), (a,), grad_fn, "relu")


def relu6(a):
    """min(max(x, 0), 6); the subgradient at both clamp boundaries is 0."""
    out = np.minimum(np.maximum(a.data, 0), 6).astype(a.data.dtype)
    mask = (a.data > 0) & (a.data < 6)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _result(out, (a,), grad_fn, "relu6")


def exp(a):
    out = np.exp(a.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g * out)

    return _result(out, (a,), grad_fn, "exp")


def log(a):
    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), grad_fn, "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g / (2 * out))

    return _result(out, (a,), grad_fn, "sqrt")


def softmax(a, axis=-1):
    """Stable softmax along ``axis`` (max is subtracted before exponentiation)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            _accum(a, out * (g - inner))

    return _result(out, (a,), grad_fn, "softmax")


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[ax] for ax in axis]))


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = _reduced_count(a.data.shape, axis)

    def grad_fn(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    return _result(out, (a,), grad_fn, "mean")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape))

    return _result(out, (a,), grad_fn, "sum")


def reshape(a, shape):
    out = a.data.reshape(shape)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _result(out, (a,), grad_fn, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g.transpose(inverse))

    return _result(out, (a,), grad_fn, "transpose")


def broadcast_to(a, shape):
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g)

    return _result(out, (a,), grad_fn, "broadcast_to")


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _result(out, tuple(tensors), grad_fn, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def grad_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _result(out, (a,), grad_fn, "narrow")


def conv2d(x, w, b=None, padding=0):
    """2-D convolution, NCHW layout, stride 1, symmetric zero padding.

    ``w`` has shape (out_channels, in_channels, kh, kw).  Odd kernels with
    padding=(k-1)//2 preserve the spatial extent.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError("conv2d channel mismatch")
    kh, kw = w.data.shape[2], w.data.shape[3]
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bihwyx,oiyx->bohw", win, w.data, optimize=True)
    ho, wo = out.shape[2], out.shape[3]
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        if w.requires_grad:
            _accum(w, np.einsum("bohw,bihwyx->oiyx", g, win, optimize=True))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gx[:, :, dy:dy + ho, dx:dx + wo] += np.einsum(
                        "bohw,oi->bihw", g, w.data[:, :, dy, dx], optimize=True
                    )
            if p:
                gx = gx[:, :, p:-p, p:-p]
            _accum(x, gx)

    return _result(out, parents, grad_fn, "conv2d")


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class.

    Accumulates the reduction in float64 regardless of storage dtype.
    Labels must be integers in [0, C) with C >= 2.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects (batch, classes) logits")
    n, c = logits.data.shape
    if c < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    labels = np.asarray(labels)
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be an integer vector matching the batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    val = -logp[np.arange(n), labels].mean()
    rows = np.arange(n)

    def grad_fn(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            _accum(logits, float(g) * p / n)

    return _result(np.asarray(val, dtype=logits.data.dtype), (logits,), grad_fn, "cross_entropy")
