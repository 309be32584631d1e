"""Window enhanced attention.

Per frame, a channel-pooled response map is scored by a valid s x s
convolution; the argmax cell gives the top-left corner of a w x w token
window (s == w). Self-attention runs over the gathered windows and the
attended tokens are written back in place; everything outside a window
passes through untouched.

The selection path (pooling, scoring, argmax) is deliberately
non-differentiable: it runs on raw arrays, the scoring kernel stays at
its all-ones initialization, and gradients flow only through the
gather -> attention -> scatter path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Module, MultiHeadAttention
from .tensor import Tensor

SCHEMES = ("joint", "divided", "space_only", "time_only")
FUSIONS = ("sum", "concat")


@dataclass(frozen=True)
class WindowSelection:
    """Per-frame window corners; idx == y * u_w + x."""

    idx: np.ndarray  # (N, T') flat argmax positions
    x: np.ndarray    # (N, T') columns of window top-left
    y: np.ndarray    # (N, T') rows of window top-left
    u_h: int
    u_w: int
    window: int


def pool_fuse(tokens: np.ndarray, fusion: str = "sum",
              proj_w=None, proj_b: float = 0.0) -> np.ndarray:
    """(N, T', Gh, Gw, C) -> per-token response (N, T', P, 1), P = Gh*Gw.

    Channel average pool and channel max pool, combined either by
    elementwise sum or by concatenation followed by a 2->1 projection.
    """
    n, tp, gh, gw, c = tokens.shape
    flat = tokens.reshape(n, tp, gh * gw, c)
    avg = flat.mean(axis=-1)
    mx = flat.max(axis=-1)
    if fusion == "sum":
        fused = avg + mx
    elif fusion == "concat":
        w = np.ones(2, dtype=tokens.dtype) if proj_w is None else np.asarray(proj_w)
        fused = avg * w[0] + mx * w[1] + proj_b
    else:
        raise ConfigError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
    return fused[..., None]


def score_windows(spatial: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid 2D correlation of (N, T', Gh, Gw) maps with an s x s kernel."""
    s = kernel.shape[-1]
    gh, gw = spatial.shape[-2:]
    if s > gh or s > gw:
        raise ConfigError(f"scoring kernel {s} exceeds grid {gh}x{gw}")
    windows = np.lib.stride_tricks.sliding_window_view(spatial, (s, s), axis=(-2, -1))
    return np.einsum("...yxuv,uv->...yx", windows, kernel.reshape(s, s))


def select_window(scored: np.ndarray, window: int) -> WindowSelection:
    """Per-frame argmax of the softmaxed score map; ties take the lowest index.

    Softmax is order-preserving, so the chosen cell equals the raw argmax;
    it is applied anyway to mirror the definition of the response score.
    No gradient is defined through the returned indices.
    """
    if not np.all(np.isfinite(scored)):
        raise DimensionError("window scores must be finite")
    n, tp, u_h, u_w = scored.shape
    flat = scored.reshape(n, tp, u_h * u_w)
    shifted = np.exp(flat - flat.max(axis=-1, keepdims=True))
    soft = shifted / shifted.sum(axis=-1, keepdims=True)
    idx = soft.argmax(axis=-1)
    return WindowSelection(idx=idx, x=idx % u_w, y=idx // u_w,
                           u_h=u_h, u_w=u_w, window=window)


def _window_key(sel: WindowSelection):
    n, tp = sel.idx.shape
    w = sel.window
    off = np.arange(w)
    n_i = np.arange(n)[:, None, None, None]
    t_i = np.arange(tp)[None, :, None, None]
    r_i = sel.y[:, :, None, None] + off[None, None, :, None]
    c_i = sel.x[:, :, None, None] + off[None, None, None, :]
    return n_i, t_i, r_i, c_i


def gather_windows(tokens: Tensor, sel: WindowSelection) -> Tensor:
    """Pull the selected w x w token windows: (N, T', w, w, C)."""
    return tokens[_window_key(sel)]


def scatter_windows(tokens: Tensor, sel: WindowSelection, win: Tensor) -> Tensor:
    """Write attended windows back in place; other tokens are untouched."""
    return tokens.index_put(_window_key(sel), win)


def window_attention(tokens: Tensor, sel: WindowSelection,
                     mha: MultiHeadAttention, scheme: str = "joint") -> Tensor:
    """Self-attend within the selected windows and write the result back.

    Each attention pass updates the window additively (win + attn(win)),
    so a zero-initialized output projection leaves tokens unchanged.
    `joint` attends over all T'*w*w window tokens at once; `divided` runs
    a spatial pass per frame then a temporal pass across frames at equal
    intra-window offsets, with shared projections.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    win = gather_windows(tokens, sel)
    n, tp, w, _, c = win.shape

    def spatial(x):
        seq = x.reshape(n * tp, w * w, c)
        return x + mha(seq).reshape(n, tp, w, w, c)

    def temporal(x):
        seq = x.transpose(0, 2, 3, 1, 4).reshape(n * w * w, tp, c)
        back = mha(seq).reshape(n, w, w, tp, c).transpose(0, 3, 1, 2, 4)
        return x + back

    if scheme == "joint":
        seq = win.reshape(n, tp * w * w, c)
        win = win + mha(seq).reshape(n, tp, w, w, c)
    elif scheme == "space_only":
        win = spatial(win)
    elif scheme == "time_only":
        win = temporal(win)
    else:  # divided
        win = temporal(spatial(win))
    return scatter_windows(tokens, sel, win)


def attention_heatmaps(tokens_data: np.ndarray, sel: WindowSelection,
                       mha: MultiHeadAttention, scheme: str = "joint") -> np.ndarray:
    """Mean attention each window token receives, as (N, T', w, w) maps.

    Mirrors the passes of ``window_attention`` on raw arrays (no tape);
    weights are averaged over heads and query positions, and over the two
    passes for the divided scheme.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    from .tensor import no_grad

    win = tokens_data[_window_key(sel)]
    n, tp, w, _, c = win.shape

    def run(seq):
        with no_grad():
            out, attn = mha(Tensor(seq), need_weights=True)
        return out.data, attn.mean(axis=(1, 2))  # received weight per key

    heats = []
    if scheme in ("joint",):
        upd, rec = run(win.reshape(n, tp * w * w, c))
        win = win + upd.reshape(win.shape)
        heats.append(rec.reshape(n, tp, w, w))
    if scheme in ("space_only", "divided"):
        upd, rec = run(win.reshape(n * tp, w * w, c))
        win = win + upd.reshape(win.shape)
        heats.append(rec.reshape(n, tp, w, w))
    if scheme in ("time_only", "divided"):
        seq = win.transpose(0, 2, 3, 1, 4).reshape(n * w * w, tp, c)
        upd, rec = run(seq)
        win = win + upd.reshape(n, w, w, tp, c).transpose(0, 3, 1, 2, 4)
        heats.append(rec.reshape(n, w, w, tp).transpose(0, 3, 1, 2))
    return np.mean(heats, axis=0)


class WindowEnhancedAttention(Module):
    """Response pooling, window selection, and windowed self-attention."""

    def __init__(self, dim: int, num_heads: int, window: int, rng,
                 scheme: str = "joint", fusion: str = "sum", dtype=np.float32):
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.mha = MultiHeadAttention(dim, num_heads, rng, dtype)
        self.window = window
        self.scheme = scheme
        self.fusion = fusion
        # Selection feeds an argmax, so these receive no gradient; all-ones
        # keeps early selection tracking raw local response energy.
        self.score_kernel = np.ones((window, window), dtype=dtype)
        self.fuse_w = np.ones(2, dtype=dtype)
        self.fuse_b = 0.0

    def select(self, tokens_data: np.ndarray) -> WindowSelection:
        n, tp, gh, gw, c = tokens_data.shape
        if self.window > gh or self.window > gw:
            raise ConfigError(f"window {self.window} exceeds grid {gh}x{gw}")
        summed = pool_fuse(tokens_data, self.fusion, self.fuse_w, self.fuse_b)
        spatial = summed.reshape(n, tp, gh, gw)
        scored = score_windows(spatial, self.score_kernel)
        return select_window(scored, self.window)

    def __call__(self, tokens: Tensor) -> Tensor:
        sel = self.select(tokens.data)
        return window_attention(tokens, sel, self.mha, self.scheme)
