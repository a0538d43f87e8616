"""Minimal reverse-mode autodiff over numpy arrays.

Only what the policy/Q networks and their losses need: dense and strided
convolution primitives, elementwise math, reductions, and a tape built
dynamically by the op functions. Gradients accumulate on leaf tensors
(parameters and explicitly-created inputs). Forward dtype follows the data;
training runs in float32, gradient-check tests build float64 graphs.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ._fused import col2im_add

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; ops return plain value tensors."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_cols_cache")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._cols_cache = None

    def share_conv_input(self) -> "Tensor":
        """Mark this tensor immutable so convolutions may reuse its im2col patches.

        Only safe when .data will not be mutated afterwards; used by the
        trainer for batch states that several networks encode.
        """
        self._cols_cache = {}
        return self

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor, accumulating into leaf .grad buffers."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.data.shape}")
            grad = np.ones_like(self.data)

        # iterative topological sort (graphs are ~100 nodes deep at most)
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # convenience arithmetic (constants allowed on either side)
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

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _pair(a, b):
    """Coerce the operands of a binary op; bare python scalars adopt the other side's dtype."""
    if not isinstance(a, Tensor):
        ref = b.data.dtype if isinstance(b, Tensor) else None
        a = Tensor(np.asarray(a, dtype=ref) if isinstance(a, (int, float)) and ref is not None else a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype) if isinstance(b, (int, float)) else b)
    return a, b


def _from_op(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    a, b = _pair(a, b)
    return _from_op(a.data + b.data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _from_op(a.data - b.data, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _from_op(a.data * b.data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _pair(a, b)
    return _from_op(a.data / b.data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _from_op(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return _from_op(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)
    return _from_op(out_data, (a,), lambda g: (g * (out_data > 0),))


def clamp(a, lo: float, hi: float):
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    return _from_op(np.where(take_a, a.data, b.data), (a, b), lambda g: (
        _unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * ~take_a, b.data.shape)))


# ---------------------------------------------------------------------------
# Reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=False),)

    return _from_op(out_data, (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis: int = 1):
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def grad_fn(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=axis))

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


# ---------------------------------------------------------------------------
# Network primitives


def linear(x, w, b=None):
    """x @ w (+ b) for x (N, F), w (F, O), b (O,).

    The forward product runs one GEMM per row: BLAS picks different kernels
    (and accumulation orders) per row-count, and outputs must be bitwise
    independent of batch position.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape} vs w {w.data.shape}")
    out_data = np.matmul(x.data[:, None, :], w.data)[:, 0]
    x_needs = x.requires_grad

    def grad_fn(g):
        gx = g @ w.data.T if x_needs else None
        if b is None:
            return gx, x.data.T @ g
        return gx, x.data.T @ g, g.sum(axis=0)

    if b is None:
        return _from_op(out_data, (x, w), grad_fn)
    b = as_tensor(b)
    return _from_op(out_data + b.data, (x, w, b), grad_fn)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    n, c, h, w = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # (N, C, OH, OW, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int):
    n, c, _, _ = x_shape
    gx = np.zeros(x_shape, dtype=gcols.dtype)
    col2im_add(gcols.reshape(n, c, kh, kw, oh, ow), gx, sh, sw)
    return gx


def conv2d(x, w, b=None, stride: int = 1):
    """2-D convolution, zero padding of size 0, square stride."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {x.data.shape} vs w {w.data.shape}")
    n = x.data.shape[0]
    oc, _, kh, kw = w.data.shape
    if x.data.shape[2] < kh or x.data.shape[3] < kw:
        raise ValueError(f"conv2d input {x.data.shape} smaller than kernel {w.data.shape}")
    cache_key = (kh, kw, stride)
    if x._cols_cache is not None and cache_key in x._cols_cache:
        cols, oh, ow = x._cols_cache[cache_key]
    else:
        cols, oh, ow = _im2col(x.data, kh, kw, stride, stride)
        if x._cols_cache is not None:
            x._cols_cache[cache_key] = (cols, oh, ow)
    w2 = w.data.reshape(oc, -1)
    out_data = np.matmul(w2, cols).reshape(n, oc, oh, ow)
    if b is not None:
        b = as_tensor(b)
        out_data += b.data.reshape(1, oc, 1, 1)
    x_needs = x.requires_grad  # skip the col2im scatter for constant inputs

    def grad_fn(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gx = None
        if x_needs:
            gcols = np.matmul(w2.T, g2)
            gx = _col2im(gcols, x.data.shape, kh, kw, stride, stride, oh, ow)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(out_data, parents, grad_fn)


def adaptive_avg_pool(x):
    """Global average pool to 1x1, emitted as (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"adaptive_avg_pool needs (N, C, H, W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.data.shape).astype(x.data.dtype, copy=False),)

    return _from_op(out_data, (x,), grad_fn)
