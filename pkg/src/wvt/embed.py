"""Clip loading and tokenization.

A raw clip is stored in the "WVF1" container: magic bytes, u16 frame
count / height / width, u8 channel count, then frame-major u8 pixels.
``patch_embed`` turns a normalized clip into the token grid used by the
backbone, laid out channels-last as (N, T', Gh, Gw, C); that layout
reshapes losslessly to the (N, T', Gh*Gw, C) sequence view.
"""

from __future__ import annotations

import struct
from functools import lru_cache

import numpy as np

from .conv import conv3d
from .errors import DimensionError, InputError, ParseError
from .nn import Conv3d, Module
from .tensor import Tensor

CLIP_MAGIC = b"WVF1"

# Defaults for synthetic data; real footage would supply its own constants.
PIXEL_MEAN = 0.45
PIXEL_STD = 0.225


def write_clip(path, frames: np.ndarray) -> None:
    """Write (T, H, W, C) u8 frames to the raw-clip container."""
    if frames.ndim != 4:
        raise DimensionError(f"expected (T, H, W, C) frames, got shape {frames.shape}")
    if frames.dtype != np.uint8:
        raise InputError(f"frames must be uint8, got {frames.dtype}")
    t, h, w, c = frames.shape
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<HHHB", t, h, w, c))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_clip(path) -> np.ndarray:
    """Read a raw-clip file back to (T, H, W, C) u8 frames."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLIP_MAGIC:
            raise ParseError(f"bad clip magic {magic!r} in {path}")
        t, h, w, c = struct.unpack("<HHHB", f.read(7))
        raw = f.read(t * h * w * c)
    if len(raw) != t * h * w * c:
        raise ParseError(f"truncated clip file {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(t, h, w, c)


def sample_frames(frames: np.ndarray, num: int, stride: int) -> np.ndarray:
    """Pick ``num`` frames ``stride`` apart, centered in the clip."""
    if num < 2 or stride < 1:
        raise InputError(f"need num >= 2 and stride >= 1, got {num}, {stride}")
    span = (num - 1) * stride + 1
    total = frames.shape[0]
    if span > total:
        raise InputError(f"cannot take {num} frames at stride {stride} from {total}")
    start = (total - span) // 2
    return frames[start : start + span : stride]


def normalize_clip(frames: np.ndarray, mean=PIXEL_MEAN, std=PIXEL_STD,
                   dtype=np.float32) -> np.ndarray:
    """(T, H, W, C) u8 -> (3, T, H, W) float in roughly [-3, 3]."""
    if frames.ndim != 4:
        raise DimensionError(f"expected (T, H, W, C) frames, got shape {frames.shape}")
    x = frames.astype(dtype) / 255.0
    if x.shape[-1] == 1:
        x = np.repeat(x, 3, axis=-1)
    elif x.shape[-1] != 3:
        raise InputError(f"expected 1 or 3 channels, got {x.shape[-1]}")
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(3, 0, 1, 2))


class PatchEmbed(Module):
    """Strided conv with kernel == stride: one token per space-time patch."""

    def __init__(self, patch, channels: int, rng, in_channels: int = 3, dtype=np.float32):
        self.patch = tuple(patch)
        self.channels = channels
        self.proj = Conv3d(in_channels, channels, self.patch, rng, stride=self.patch,
                           dtype=dtype)

    def __call__(self, clip: Tensor) -> Tensor:
        n, c, t, h, w = clip.shape
        pt, ph, pw = self.patch
        if t % pt or h % ph or w % pw:
            raise DimensionError(
                f"clip dims ({t},{h},{w}) not divisible by patch {self.patch}")
        out = self.proj(clip)  # (N, C, T', Gh, Gw)
        return out.transpose(0, 2, 3, 4, 1)


@lru_cache(maxsize=8)
def _sincos_1d(length: int, dim: int, dtype_name: str) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (i // 2 * 2) / max(dim, 1))
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.dtype(dtype_name))


@lru_cache(maxsize=8)
def positional_table(tp: int, gh: int, gw: int, channels: int,
                     dtype_name: str = "float32") -> np.ndarray:
    """Fixed (T', Gh, Gw, C) encoding: channel blocks carry one axis each."""
    ct = channels - 2 * (channels // 3)
    ch = cw = channels // 3
    out = np.zeros((tp, gh, gw, channels), dtype=np.dtype(dtype_name))
    out[..., :ct] = _sincos_1d(tp, ct, dtype_name)[:, None, None, :]
    out[..., ct : ct + ch] = _sincos_1d(gh, ch, dtype_name)[None, :, None, :]
    out[..., ct + ch :] = _sincos_1d(gw, cw, dtype_name)[None, None, :, :]
    return out


def add_positional(tokens: Tensor) -> Tensor:
    n, tp, gh, gw, c = tokens.shape
    table = positional_table(tp, gh, gw, c, np.dtype(tokens.dtype).name)
    return tokens + Tensor(table[None])
