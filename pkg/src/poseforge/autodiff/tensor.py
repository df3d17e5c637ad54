"""Reverse-mode automatic differentiation on numpy arrays.

Every op records its parents and a closure that pushes the output
gradient back to them.  ``backward`` walks the recorded graph in exact
reverse topological order.  Any op producing a NaN or infinity raises
:class:`NumericalError` immediately.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericalError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, op="leaf",
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Trainable tensor with its gradient and Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True, op="param")
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")
    return arr


def _make(data, parents, backward_fn, op):
    _finite(data, op)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents, backward_fn, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    # intermediate gradients are rebuilt on every pass; leaves accumulate
    for node in order:
        if node.backward_fn is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    for node in order:
        if node.backward_fn is not None and node is not loss:
            node.grad = None


# ---------------------------------------------------------------- basic ops


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """x @ weight.T + bias, weight stored as (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _make(out, parents, bw, "linear")


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(out, (a,), bw, "transpose")


def getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(np.array(out), (a,), bw, "getitem")


def sum_(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _make(np.asarray(out), (a,), bw, "mean")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _make(out, tuple(tensors), bw, "concat")


def take_last(a, index):
    """a[..., index[...]]: one element of the last axis per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {index.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        _accumulate(a, full)

    return _make(out, (a,), bw, "take_last")


# ---------------------------------------------------------- nonlinearities


def relu(a):
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), bw, "relu")


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def softmax(a):
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------- pooling


def global_max_pool(a, axis=1):
    """Max over a set axis; ties go to the lowest index."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(a, full)

    out = _make(out, (a,), bw, "global_max_pool")
    return out, idx


def global_avg_pool2d(a):
    """(N, C, H, W) -> (N, C)."""
    return mean(reshape(a, (a.shape[0], a.shape[1], -1)), axis=2)


def max_pool2d(a, k=2):
    n, c, h, w = a.shape
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = a.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // k, w // k, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(a.shape)
        _accumulate(a, gx)

    return _make(out, (a,), bw, "max_pool2d")


# ------------------------------------------------------------- convolution


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of (N, C, H, W) with (O, C, kh, kw) weights."""
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        _accumulate(weight, (gm.T @ cols).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _accumulate(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


# ----------------------------------------------------------- normalization


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Batch normalization over all axes except 1 (channels).

    ``running_mean``/``running_var`` are numpy arrays updated in place in
    training mode: running = momentum * running + (1 - momentum) * batch.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    count = x.data.size // x.shape[1]
    if training:
        if x.shape[0] < 2:
            raise ShapeError("train-mode batchnorm needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv_std.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        _accumulate(x, dx)

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


# ------------------------------------------------------------------ losses


def cross_entropy(probs, target, floor=1e-12):
    """-log(p[target]) per row; probabilities clamped at ``floor``."""
    target = np.asarray(target, dtype=np.int64)
    n_classes = probs.shape[-1]
    if np.any(target < 0) or np.any(target >= n_classes):
        raise IndexError(f"target index out of range [0, {n_classes})")
    p = np.take_along_axis(probs.data, target[..., None], axis=-1)[..., 0]
    clamped = np.maximum(p, floor)
    out = -np.log(clamped)

    def bw(g):
        full = np.zeros_like(probs.data)
        local = np.where(p >= floor, -g / clamped, 0.0)
        np.put_along_axis(full, target[..., None], local[..., None], axis=-1)
        _accumulate(probs, full)

    return _make(out, (probs,), bw, "cross_entropy")


def huber(residual, delta=1.0):
    """r^2/2 inside |r| <= delta, delta*(|r| - delta/2) outside; elementwise."""
    if not delta > 0:
        raise ValueError("huber delta must be positive")
    residual = as_tensor(residual)
    r = residual.data
    a = np.abs(r)
    out = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))

    def bw(g):
        _accumulate(residual, g * np.clip(r, -delta, delta))

    return _make(out, (residual,), bw, "huber")
