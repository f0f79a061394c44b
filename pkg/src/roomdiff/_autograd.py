"""Minimal reverse-mode autodiff over numpy float64 arrays.

Internal module: the public training contract is "analytic gradients match
central finite differences"; this tape is how the library meets it.  Only the
smooth primitives the models need are provided (no relu/max), so every
composed forward pass stays differentiable to machine precision.
"""
from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Var":
        return Var(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Var(data, requires_grad=True, parents=parents, backward=backward)
    return Var(data)


def _accum(v: Var, g: np.ndarray):
    if v.grad is None:
        v.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        v.grad += g


def add(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def div(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a):
    a = as_var(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make(-a.data, (a,), bw)


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), bw)


def exp(a):
    a = as_var(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = as_var(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = as_var(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def powc(a, p: float):
    """a ** p for a constant exponent."""
    a = as_var(a)
    out_data = a.data**p

    def bw(g):
        if a.requires_grad:
            _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = as_var(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def silu(a):
    a = as_var(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def bw(g):
        if a.requires_grad:
            _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _make(out_data, (a,), bw)


def sum_(a, axis=None, keepdims=False):
    a = as_var(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def mean_(a, axis=None, keepdims=False):
    a = as_var(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_var(a)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes):
    a = as_var(a)
    inv = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def concat(vars_, axis=0):
    vars_ = [as_var(v) for v in vars_]
    sizes = [v.data.shape[axis] for v in vars_]
    out_data = np.concatenate([v.data for v in vars_], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for v, lo, hi in zip(vars_, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accum(v, g[tuple(index)])

    return _make(out_data, tuple(vars_), bw)


def slice_axis(a, axis: int, start: int, stop: int):
    a = as_var(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accum(a, full)

    return _make(a.data[index].copy(), (a,), bw)


def take_rows(table, ids):
    """Gather rows of a 2-D table by integer ids (embedding lookup)."""
    table = as_var(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _make(table.data[ids], (table,), bw)


def softmax_last(a, bias=None):
    """Softmax over the last axis with an optional additive logit bias.

    The row max is subtracted as a detached constant, which keeps the
    gradient exact because softmax is shift invariant.
    """
    logits = add(a, bias) if bias is not None else as_var(a)
    shift = Var(logits.data.max(axis=-1, keepdims=True))
    e = exp(sub(logits, shift))
    return div(e, sum_(e, axis=-1, keepdims=True))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[1]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # (b, ho, wo, c*kh*kw)
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(b * ho * wo, c * kh * kw)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0):
    """2-D convolution, x (B,C,H,W) with w (O,C,kh,kw), via im2col."""
    x, w = as_var(x), as_var(w)
    if bias is not None:
        bias = as_var(bias)
    b, c, h, wd = x.data.shape
    o, _, kh, kw = w.data.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, c * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    out_data = y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = gmat @ wmat  # (b*ho*wo, c*kh*kw)
            dcols = dcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            _accum(x, dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out_data, parents, bw)


def upsample2x(a):
    """Nearest-neighbour 2x spatial upsampling of (B,C,H,W)."""
    a = as_var(a)
    out_data = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        if a.requires_grad:
            b, c, h2, w2 = g.shape
            _accum(a, g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (a,), bw)


def backward(root: Var):
    """Run reverse-mode accumulation from a scalar root."""
    if root.data.size != 1:
        raise ValueError("backward: root must be scalar")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
