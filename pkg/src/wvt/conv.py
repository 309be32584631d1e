"""3-D convolution (correlation) kernels with stride, padding and groups.

The forward path is im2col: a strided sliding-window view of the padded
input is contracted against the kernel, through BLAS when groups == 1 and
through a per-channel einsum for depthwise layers. The input gradient is the
transposed convolution, computed by stride-dilating the output gradient and
correlating it with the flipped, channel-transposed kernel; non-overlapping
layers (stride == kernel, no padding) take a pure reshape fast path instead.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, _record

Triple = Tuple[int, int, int]


def _as_triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"expected 3 axis values, got {v!r}")
    return t


def _resolve_padding(padding, kernel: Triple, stride: Triple) -> Triple:
    if padding == "valid":
        return (0, 0, 0)
    if padding == "same":
        if stride != (1, 1, 1):
            raise ConfigError("same padding requires stride 1")
        if any(k % 2 == 0 for k in kernel):
            raise ConfigError("same padding requires odd kernels")
        return tuple(k // 2 for k in kernel)
    raise ConfigError(f"unknown padding mode {padding!r}")


def _pad3d(x: np.ndarray, p: Triple) -> np.ndarray:
    if p == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _window_view(xp: np.ndarray, kernel: Triple, stride: Triple) -> np.ndarray:
    # (N, C, To, Ho, Wo, kt, kh, kw), still a view of xp
    w = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return w[:, :, :: stride[0], :: stride[1], :: stride[2]]


def _conv_forward(xp: np.ndarray, weight: np.ndarray, stride: Triple, groups: int) -> np.ndarray:
    n, cin = xp.shape[:2]
    cout = weight.shape[0]
    kernel = weight.shape[2:]
    win = _window_view(xp, kernel, stride)
    to, ho, wo = win.shape[2:5]
    ksize = int(np.prod(kernel))
    if groups == 1:
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, cin * ksize)
        y = cols @ weight.reshape(cout, cin * ksize).T
        return y.reshape(n, to, ho, wo, cout).transpose(0, 4, 1, 2, 3)
    if groups == cin and cout == cin:
        # depthwise: one filter per channel
        return np.einsum("ncthwijk,cijk->ncthw", win, weight[:, 0], optimize=True)
    cg, og = cin // groups, cout // groups
    wg = weight.reshape(groups, og, cg * ksize)
    out = np.empty((n, cout, to, ho, wo), dtype=xp.dtype)
    for g in range(groups):
        sl = win[:, g * cg : (g + 1) * cg]
        cols = sl.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, cg * ksize)
        yg = cols @ wg[g].T
        out[:, g * og : (g + 1) * og] = yg.reshape(n, to, ho, wo, og).transpose(0, 4, 1, 2, 3)
    return out


def _grad_weight(xp: np.ndarray, g: np.ndarray, kernel: Triple, stride: Triple, groups: int) -> np.ndarray:
    n, cin = xp.shape[:2]
    cout = g.shape[1]
    win = _window_view(xp, kernel, stride)
    ksize = int(np.prod(kernel))
    if groups == 1:
        to, ho, wo = win.shape[2:5]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, cin * ksize)
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        return (g2.T @ cols).reshape(cout, cin, *kernel)
    if groups == cin and cout == cin:
        gw = np.einsum("ncthwijk,ncthw->cijk", win, g, optimize=True)
        return gw[:, None]
    cg, og = cin // groups, cout // groups
    gw = np.empty((cout, cg, *kernel), dtype=xp.dtype)
    for gi in range(groups):
        sl = win[:, gi * cg : (gi + 1) * cg]
        to, ho, wo = sl.shape[2:5]
        cols = sl.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * to * ho * wo, cg * ksize)
        g2 = g[:, gi * og : (gi + 1) * og].transpose(0, 2, 3, 4, 1).reshape(-1, og)
        gw[gi * og : (gi + 1) * og] = (g2.T @ cols).reshape(og, cg, *kernel)
    return gw


def _dilate(g: np.ndarray, stride: Triple) -> np.ndarray:
    if stride == (1, 1, 1):
        return g
    n, c, t, h, w = g.shape
    out = np.zeros((n, c, (t - 1) * stride[0] + 1, (h - 1) * stride[1] + 1, (w - 1) * stride[2] + 1),
                   dtype=g.dtype)
    out[:, :, :: stride[0], :: stride[1], :: stride[2]] = g
    return out


def _grad_input(g: np.ndarray, weight: np.ndarray, in_shape, stride: Triple, pad: Triple,
                groups: int) -> np.ndarray:
    n, cin, t, h, w = in_shape
    cout = weight.shape[0]
    kernel = weight.shape[2:]
    kt, kh, kw = kernel
    if stride == kernel and pad == (0, 0, 0) and t % kt == 0 and h % kh == 0 and w % kw == 0:
        # non-overlapping windows: scatter each kernel-sized block by reshape
        to, ho, wo = g.shape[2:]
        cg, og = cin // groups, cout // groups
        g2 = g.reshape(n, groups, og, to, ho, wo).transpose(0, 3, 4, 5, 1, 2).reshape(-1, groups, og)
        wg = weight.reshape(groups, og, cg * kt * kh * kw)
        blocks = np.einsum("lgo,goc->lgc", g2, wg, optimize=True)
        blocks = blocks.reshape(n, to, ho, wo, cin, kt, kh, kw)
        return np.ascontiguousarray(
            blocks.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, cin, t, h, w))
    # general: correlate the dilated gradient with the flipped kernel
    gd = _dilate(g, stride)
    gp = np.pad(gd, ((0, 0), (0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    cg, og = cin // groups, cout // groups
    wt = weight.reshape(groups, og, cg, kt, kh, kw)
    wt = wt.transpose(0, 2, 1, 3, 4, 5)[:, :, :, ::-1, ::-1, ::-1]
    wt = np.ascontiguousarray(wt.reshape(cin, og, kt, kh, kw))
    gx_full = _conv_forward(gp, wt, (1, 1, 1), groups)
    # cover input cells past the last window, then strip the forward padding
    tp, hp, wp = t + 2 * pad[0], h + 2 * pad[1], w + 2 * pad[2]
    gxp = np.zeros((n, cin, tp, hp, wp), dtype=g.dtype)
    ft, fh, fw = gx_full.shape[2:]
    gxp[:, :, :ft, :fh, :fw] = gx_full
    return np.ascontiguousarray(
        gxp[:, :, pad[0] : pad[0] + t, pad[1] : pad[1] + h, pad[2] : pad[2] + w])


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding="valid", groups: int = 1) -> Tensor:
    """Grouped 3-D correlation over (N, C, T, H, W) input.

    ``weight`` is (Cout, Cin/groups, kt, kh, kw); output length per axis is
    floor((in + 2p - k) / stride) + 1. groups == Cin == Cout is depthwise.
    """
    stride = _as_triple(stride)
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects rank-5 input/weight, got {x.shape} and {weight.shape}")
    n, cin, t, h, w = x.shape
    cout = weight.shape[0]
    kernel = weight.shape[2:]
    if cin % groups or cout % groups:
        raise ConfigError(f"groups {groups} must divide Cin {cin} and Cout {cout}")
    if weight.shape[1] != cin // groups:
        raise DimensionError(f"weight channel dim {weight.shape[1]} != Cin/groups {cin // groups}")
    pad = _resolve_padding(padding, kernel, stride)
    if any(dim + 2 * p < k for dim, p, k in zip((t, h, w), pad, kernel)):
        raise DimensionError(f"kernel {kernel} does not fit input {(t, h, w)} with padding {pad}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")

    xp = _pad3d(x.data, pad)
    out = _conv_forward(xp, weight.data, stride, groups)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    def pull(g):
        gx = _grad_input(g, weight.data, x.shape, stride, pad, groups) if (x.requires_grad or x.node) else None
        gw = _grad_weight(xp, g, kernel, stride, groups) if (weight.requires_grad or weight.node) else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if (bias.requires_grad or bias.node) else None
        return gx, gw, gb
    return _record(out, "conv3d", parents, pull)
