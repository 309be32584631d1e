"""Layer building blocks on top of the tensor core.

Modules are plain objects holding parameter tensors and sub-modules;
``named_params`` walks attributes in definition order, which keeps
checkpoint layout and optimizer state deterministic.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as tt
from .conv import conv3d
from .errors import ConfigError
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations.

    Rejection sampling; redrawing only the out-of-range tail keeps it
    fast for multi-million parameter layers.
    """
    draw = np.float32 if np.dtype(dtype) == np.float32 else np.float64
    vals = rng.standard_normal(int(np.prod(shape)), dtype=draw)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()), dtype=draw)
        bad = np.abs(vals) > 2.0
    return (vals * std).astype(dtype).reshape(shape)


def fanin_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class providing recursive, deterministic parameter discovery."""

    def named_params(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{prefix}{name}.{i}", item))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.grad = None


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, dtype=np.float32, bias=True):
        self.weight = Tensor(trunc_normal(rng, (dout, din), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return tt.layer_norm(x, self.gamma, self.beta, eps=self.eps, axis=axis)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel, rng, stride=1, padding="valid",
                 groups: int = 1, dtype=np.float32, bias=True):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = (cin // groups) * int(np.prod(kernel))
        self.weight = Tensor(fanin_uniform(rng, (cout, cin // groups) + kernel, fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                      groups=self.groups)


class Mlp(Module):
    """Two linear layers with a GELU between, applied over the last axis."""

    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over (B, L, C) sequences."""

    def __init__(self, dim: int, num_heads: int, rng, dtype=np.float32):
        if dim % num_heads:
            raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5

    def __call__(self, x: Tensor, need_weights: bool = False):
        b, l, c = x.shape
        h, d = self.num_heads, self.head_dim
        def split(t):  # (B, L, C) -> (B, H, L, d)
            return t.reshape(b, l, h, d).transpose(0, 2, 1, 3)
        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        attn = tt.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)  # (B, H, L, L)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, l, c)
        out = self.wo(out)
        if need_weights:
            return out, attn.data
        return out
