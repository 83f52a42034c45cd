"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a node holding its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` slots.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..errors import DegenerateVectorError, DimensionError, DomainError

DTYPE = np.float64
NORM_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics for operands of rank >= 1 with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul operands must be at least 1-D")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------- elementwise


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- shape


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward)


def take_rows(weight, indices) -> Tensor:
    """Gather ``weight[indices]`` along axis 0; backward scatter-adds."""
    weight = as_tensor(weight)
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, indices, g)
        return (out,)

    return _make(weight.data[indices], (weight,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- reductions


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; positions where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    s = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def logsumexp(x, axis: int = -1, mask=None) -> Tensor:
    x = as_tensor(x)
    s = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    w = e / tot
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * w,))


def max_over_last(x, mask=None) -> Tensor:
    """Max along the last axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise DomainError("max over an empty axis")
    s = x.data if mask is None else np.where(mask, x.data, -np.inf)
    arg = np.argmax(s, axis=-1)[..., None]
    out = np.take_along_axis(x.data, arg, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g[..., None], axis=-1)
        return (gx,)

    return _make(out, (x,), backward)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < NORM_FLOOR):
        raise DegenerateVectorError(f"cannot normalize a vector with norm below {NORM_FLOOR}")
    out = x.data / norm
    return _make(out, (x,),
                 lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,))


# ---------------------------------------------------------------- convolution


def conv1d_per_channel(x, weight, bias) -> Tensor:
    """Independent single-input-channel convolutions, one per channel.

    x: (..., C, T); weight: (C, F, K); bias: (C, F) -> (..., C, F, T).
    Zero same-padding of K // 2 on both ends, cross-correlation orientation.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 2 or weight.ndim != 3 or bias.ndim != 2:
        raise DimensionError(f"conv shapes: input {x.shape}, kernels {weight.shape}, bias {bias.shape}")
    c, f, k = weight.shape
    t = x.shape[-1]
    if x.shape[-2] != c or bias.shape != (c, f):
        raise DimensionError(f"conv shapes: input {x.shape}, kernels {weight.shape}, bias {bias.shape}")
    if k % 2 == 0:
        raise DomainError(f"kernel width must be odd, got {k}")
    pad = k // 2
    if t < 1 or k > t + 2 * pad:
        raise DomainError(f"kernel width {k} exceeds padded length {t + 2 * pad}")
    lead = x.shape[:-2]
    n = int(np.prod(lead, dtype=int))
    xp = np.pad(x.data.reshape(n, c, t), [(0, 0), (0, 0), (pad, pad)])
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # (N, C, T, K)
    # one (N*T, K) @ (K, F) product per channel
    win_c = np.ascontiguousarray(win.transpose(1, 0, 2, 3)).reshape(c, n * t, k)
    out = np.matmul(win_c, np.swapaxes(weight.data, 1, 2)) + bias.data[:, None, :]  # (C, N*T, F)
    out = out.reshape(c, n, t, f).transpose(1, 0, 3, 2).reshape(lead + (c, f, t))

    def backward(g):
        gt = np.ascontiguousarray(g.reshape(n, c, f, t).transpose(1, 0, 3, 2)).reshape(c, n * t, f)
        gw = np.swapaxes(np.matmul(np.swapaxes(win_c, 1, 2), gt), 1, 2)
        gb = gt.sum(axis=1)
        if not x.requires_grad:
            return None, gw, gb
        gwin = np.matmul(gt, weight.data).reshape(c, n, t, k).transpose(1, 0, 2, 3)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j:j + t] += gwin[..., j]
        return gxp[..., pad:pad + t].reshape(x.shape), gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)


def conv1d_maxpool_per_channel(x, weight, bias, mask=None) -> Tensor:
    """``max_over_last(conv1d_per_channel(x, weight, bias), mask)`` as one node.

    x: (..., C, T); mask: broadcastable to (..., T) -> (..., C, F). Works in
    the (C, N, T, F) layout the per-channel matmul produces, which avoids
    materialising the transposed feature map.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    c, f, k = weight.shape
    t = x.shape[-1]
    if x.ndim < 2 or x.shape[-2] != c or bias.shape != (c, f):
        raise DimensionError(f"conv shapes: input {x.shape}, kernels {weight.shape}, bias {bias.shape}")
    if k % 2 == 0:
        raise DomainError(f"kernel width must be odd, got {k}")
    pad = k // 2
    lead = x.shape[:-2]
    n = int(np.prod(lead, dtype=int))
    if not x.requires_grad:
        return _conv_maxpool_sparse(x, weight, bias, mask, lead, n)
    xp = np.pad(x.data.reshape(n, c, t), [(0, 0), (0, 0), (pad, pad)])
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    win_c = np.ascontiguousarray(win.transpose(1, 0, 2, 3)).reshape(c, n * t, k)
    fmap = (np.matmul(win_c, np.swapaxes(weight.data, 1, 2)) + bias.data[:, None, :]).reshape(c, n, t, f)
    if mask is not None:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), lead + (t,)).reshape(1, n, t, 1)
        fmap = np.where(valid, fmap, -np.inf)
    arg = np.argmax(fmap, axis=2)[:, :, None, :]  # (C, N, 1, F), first maximum
    best = np.take_along_axis(fmap, arg, axis=2)[:, :, 0, :]
    out = best.transpose(1, 0, 2).reshape(lead + (c, f))

    def backward(g):
        gcn = g.reshape(n, c, f).transpose(1, 0, 2)  # (C, N, F)
        gmap = np.zeros((c, n, t, f))
        np.put_along_axis(gmap, arg, gcn[:, :, None, :], axis=2)
        gmap = gmap.reshape(c, n * t, f)
        gw = np.swapaxes(np.matmul(np.swapaxes(win_c, 1, 2), gmap), 1, 2)
        gb = gcn.sum(axis=1)
        if not x.requires_grad:
            return None, gw, gb
        gwin = np.matmul(gmap, weight.data).reshape(c, n, t, k).transpose(1, 0, 2, 3)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j:j + t] += gwin[..., j]
        return gxp[..., pad:pad + t].reshape(x.shape), gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)


def _conv_maxpool_sparse(x, weight, bias, mask, lead, n) -> Tensor:
    """Constant-input path of ``conv1d_maxpool_per_channel``.

    A series that is zero everywhere has the feature map ``bias`` at every
    position, so its pooled output is exactly ``bias`` and all of its gradient
    goes to ``bias``. Only the non-zero series are convolved.
    """
    c, f, k = weight.shape
    t = x.shape[-1]
    pad = k // 2
    xs = x.data.reshape(n, c, t).transpose(1, 0, 2)  # (C, N, T)
    valid = np.ones((n, t), dtype=bool) if mask is None else \
        np.broadcast_to(np.asarray(mask, dtype=bool), lead + (t,)).reshape(n, t)
    # a series with no valid position pools to -inf; leave it to the dense rows
    active = np.any(xs != 0, axis=2) | ~valid.any(axis=1)[None, :]
    ci, ni = np.nonzero(active)  # sorted by channel
    xp = np.pad(xs[ci, ni], [(0, 0), (pad, pad)])
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)  # (P, T, K)
    w_p = weight.data[ci]  # (P, F, K)
    fmap = np.matmul(win, np.swapaxes(w_p, 1, 2)) + bias.data[ci][:, None, :]  # (P, T, F)
    fmap = np.where(valid[ni][:, :, None], fmap, -np.inf)
    arg = np.argmax(fmap, axis=1)[:, None, :]  # (P, 1, F)
    out_cn = np.broadcast_to(bias.data[:, None, :], (c, n, f)).copy()
    out_cn[ci, ni] = np.take_along_axis(fmap, arg, axis=1)[:, 0, :]
    out = out_cn.transpose(1, 0, 2).reshape(lead + (c, f))
    starts = np.flatnonzero(np.r_[True, ci[1:] != ci[:-1]]) if len(ci) else np.zeros(0, dtype=int)

    def backward(g):
        gcn = g.reshape(n, c, f).transpose(1, 0, 2)
        gmap = np.zeros((len(ci), t, f))
        np.put_along_axis(gmap, arg, gcn[ci, ni][:, None, :], axis=1)
        gw = np.zeros(weight.shape)
        if len(ci):
            gw_p = np.matmul(np.swapaxes(gmap, 1, 2), win)  # (P, F, K)
            gw[ci[starts]] = np.add.reduceat(gw_p, starts, axis=0)
        return None, gw, gcn.sum(axis=1)

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)
