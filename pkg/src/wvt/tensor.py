"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy array. Every differentiable operation
records a ``TapeNode`` carrying the parent tensors and a closure that maps the
output gradient to parent gradients; the nodes form an implicit tape ordered
by a global sequence counter. ``backward`` replays that tape strictly in
reverse recording order, visiting each reachable node exactly once, and
accumulates gradients into ``.grad`` on leaf tensors that require them.

Only first-order derivatives are supported; gradients are plain numpy arrays,
never tensors on the tape. Ops are pure: identical inputs give bit-identical
outputs, and tensors are treated as immutable once created.
"""

from __future__ import annotations

import itertools
import struct
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import DimensionError, NumericError

DTYPES = (np.float32, np.float64)

_seq = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class TapeNode:
    """One recorded operation: parents, and a pullback for the output grad."""

    __slots__ = ("op", "parents", "pullback", "seq")

    def __init__(self, op, parents, pullback):
        self.op = op
        self.parents = parents
        self.pullback = pullback  # grad_out ndarray -> tuple of parent grads
        self.seq = next(_seq)


class Tensor:
    """A dense row-major array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    # -- introspection ----------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def index_put(self, idx, value):
        return index_put(self, idx, value)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, op, parents, pullback) -> Tensor:
    """Wrap op output; attach a tape node when recording is live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p.node is not None for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, pullback)
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None):
    """Propagate d(loss)/d(x) to every reachable leaf with requires_grad.

    Traversal is by strictly decreasing recording sequence, so each node is
    visited exactly once and only after all its consumers.
    """
    if grad is None:
        if loss.data.size != 1:
            raise DimensionError("backward without explicit grad needs a scalar loss")
        grad = np.ones_like(loss.data)
    # collect reachable nodes
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is not None and n.seq not in nodes:
            nodes[n.seq] = (n, t)
            stack.extend(n.parents)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    if loss.requires_grad and loss.node is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
    for seq in sorted(nodes, reverse=True):
        node, out = nodes[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue  # recorded but not on a path to the loss
        parent_grads = node.pullback(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not (p.requires_grad or p.node is not None):
                continue
            if p.node is None:
                if p.requires_grad:
                    p.grad = pg if p.grad is None else p.grad + pg
            else:
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    return _record(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    return _record(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data
    return _record(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data
    return _record(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _record(out, "pow", (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, "sqrt", (a,), lambda g: (g * (0.5 / out),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy @ semantics on the last two axes."""
    out = a.data @ b.data
    def pull(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _record(out, "matmul", (a, b), pull)


# -- shape movement -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    """Slice or fancy-index; backward scatter-adds into the source shape."""
    out = a.data[idx]
    def pull(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)
    return _record(np.ascontiguousarray(out), "getitem", (a,), pull)


def index_put(a: Tensor, idx, v: Tensor) -> Tensor:
    """Out-of-place write: copy of ``a`` with ``a[idx] = v``.

    Index positions must not overlap; the gradient to ``a`` is masked out at
    the written positions and the gradient to ``v`` is gathered from them.
    """
    out = a.data.copy()
    out[idx] = v.data
    def pull(g):
        ga = g.copy()
        ga[idx] = 0
        return ga, np.ascontiguousarray(g[idx])
    return _record(out, "index_put", (a, v), pull)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def pull(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))
    return _record(out, "concat", tuple(tensors), pull)


# -- reductions -----------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def pull(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.data.dtype),)
    return _record(out, "sum", (a,), pull)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    def pull(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).astype(a.data.dtype),)
    return _record(out, "mean", (a,), pull)


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties route the gradient to the first maximum."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        flat_arg = int(a.data.argmax())
        def pull(g):
            ga = np.zeros_like(a.data)
            ga.flat[flat_arg] = g
            return (ga,)
    else:
        if isinstance(axis, tuple):
            raise DimensionError("max supports a single axis; flatten first")
        arg = a.data.argmax(axis=axis)
        def pull(g):
            g2 = g if keepdims else np.expand_dims(g, axis)
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, np.expand_dims(arg, axis), g2, axis)
            return (ga,)
    return _record(out, "max", (a,), pull)


# -- activations and normalization ---------------------------------------

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = x * phi
    def pull(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)
    return _record(out.astype(x.dtype), "gelu", (a,), pull)


def sigmoid(a: Tensor) -> Tensor:
    # stable two-sided form
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    return _record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; slices sum to one."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    def pull(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _record(out, "softmax", (a,), pull)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    ``gamma`` and ``beta`` are 1-D with the length of the normalized axis.
    """
    if eps <= 0:
        raise DimensionError("layer_norm needs eps > 0")
    if a.shape[axis] == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gamma.shape != (a.shape[axis],) or beta.shape != (a.shape[axis],):
        raise DimensionError(f"affine shape {gamma.shape} does not match axis length {a.shape[axis]}")
    x = a.data
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    gmb = gamma.data.reshape(bshape)
    btb = beta.data.reshape(bshape)
    mu = x.mean(axis=ax, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gmb + btb
    red = tuple(i for i in range(x.ndim) if i != ax)
    def pull(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gg = g * gmb
        m1 = gg.mean(axis=ax, keepdims=True)
        m2 = (gg * xhat).mean(axis=ax, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        return dx.astype(x.dtype), dgamma.astype(x.dtype), dbeta.astype(x.dtype)
    return _record(out.astype(x.dtype), "layer_norm", (a, gamma, beta), pull)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``y = x @ weight.T + bias``."""
    din = x.shape[-1]
    if weight.shape[1] != din:
        raise DimensionError(f"linear: input dim {din} vs weight {weight.shape}")
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
        y2 = y2 + bias.data
    out = y2.reshape(x.shape[:-1] + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)
    def pull(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _record(out, "linear", parents, pull)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Multi-label binary cross entropy: sum over classes, mean over rows.

    ``targets`` is a constant {0,1} array of the same shape as ``logits``.
    The stable form softplus(z) - z*t keeps huge logits finite, and the
    gradient is (sigmoid(z) - t) / rows.
    """
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} vs logits {logits.shape}")
    z = logits.data
    per = np.logaddexp(0.0, z) - z * t
    rows = z.shape[0] if z.ndim > 1 else 1
    out = per.sum() / rows
    def pull(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * (s - t).astype(z.dtype) / rows,)
    return _record(np.asarray(out, dtype=z.dtype), "bce_with_logits", (logits,), pull)


# -- serialization --------------------------------------------------------

_MAGIC = b"WVT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def write_tensor(fh, arr: np.ndarray):
    """Little-endian binary dump: magic, dtype u8, rank u8, dims u32, raw values."""
    shape = arr.shape
    arr = np.ascontiguousarray(arr)  # promotes 0-d to 1-d, hence the saved shape
    if arr.dtype not in _DTYPE_CODES:
        raise NumericError(f"unsupported dtype {arr.dtype}")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], len(shape)))
    fh.write(struct.pack(f"<{len(shape)}I", *shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise NumericError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    dt = _CODE_DTYPES[code]
    n = int(np.prod(dims)) if dims else 1
    raw = fh.read(n * dt.itemsize)
    return np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(dims)


def save_tensor(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
