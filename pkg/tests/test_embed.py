"""Clip container, frame sampling, patch embedding, positional tables."""

import numpy as np
import pytest

from wvt.embed import (CLIP_MAGIC, PatchEmbed, add_positional, normalize_clip,
                       positional_table, read_clip, sample_frames, write_clip)
from wvt.errors import DimensionError, InputError, ParseError
from wvt.tensor import Tensor


def test_clip_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    frames = rng.integers(0, 256, size=(5, 7, 9, 1), dtype=np.uint8)
    p = tmp_path / "c.wvf"
    write_clip(p, frames)
    back = read_clip(p)
    assert back.shape == (5, 7, 9, 1)
    assert np.array_equal(back, frames)


def test_clip_header_layout(tmp_path):
    frames = np.zeros((2, 3, 4, 1), dtype=np.uint8)
    p = tmp_path / "c.wvf"
    write_clip(p, frames)
    raw = p.read_bytes()
    assert raw[:4] == CLIP_MAGIC
    # <HHHB header then T*H*W*C payload bytes
    assert len(raw) == 4 + 7 + 2 * 3 * 4


def test_clip_bad_magic(tmp_path):
    p = tmp_path / "c.wvf"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ParseError):
        read_clip(p)


def test_clip_truncated(tmp_path):
    frames = np.zeros((2, 3, 4, 1), dtype=np.uint8)
    p = tmp_path / "c.wvf"
    write_clip(p, frames)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ParseError):
        read_clip(p)


def test_clip_rejects_wrong_dtype(tmp_path):
    with pytest.raises(InputError):
        write_clip(tmp_path / "c.wvf", np.zeros((2, 3, 4, 1), dtype=np.float32))


def test_sample_frames_centered():
    frames = np.arange(64)[:, None, None, None]
    out = sample_frames(frames, 16, 4)
    # span 61 inside 64 leaves offset 1
    assert np.array_equal(out[:, 0, 0, 0], np.arange(1, 62, 4))
    out = sample_frames(np.arange(16)[:, None, None, None], 8, 2)
    assert np.array_equal(out[:, 0, 0, 0], np.arange(0, 15, 2))


def test_sample_frames_too_short():
    with pytest.raises(InputError):
        sample_frames(np.zeros((10, 1, 1, 1)), 16, 4)


def test_normalize_clip_values():
    frames = np.full((2, 3, 3, 1), 129, dtype=np.uint8)
    x = normalize_clip(frames, mean=0.45, std=0.225)
    assert x.shape == (3, 2, 3, 3)
    expect = (129 / 255.0 - 0.45) / 0.225
    assert np.allclose(x, expect, atol=1e-6)


def test_normalize_clip_replicates_gray():
    rng = np.random.default_rng(1)
    frames = rng.integers(0, 256, size=(2, 4, 4, 1), dtype=np.uint8)
    x = normalize_clip(frames)
    assert np.array_equal(x[0], x[1]) and np.array_equal(x[1], x[2])


def test_patch_embed_grid_shapes():
    rng = np.random.default_rng(0)
    pe = PatchEmbed((2, 16, 16), 8, rng)
    clip = Tensor(np.zeros((1, 3, 16, 224, 224), dtype=np.float32))
    assert pe(clip).shape == (1, 8, 14, 14, 8)
    pe = PatchEmbed((2, 8, 8), 8, rng)
    clip = Tensor(np.zeros((1, 3, 8, 32, 32), dtype=np.float32))
    assert pe(clip).shape == (1, 4, 4, 4, 8)


def test_patch_embed_rejects_indivisible():
    pe = PatchEmbed((2, 16, 16), 8, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        pe(Tensor(np.zeros((1, 3, 16, 225, 224), dtype=np.float32)))


def test_patch_embed_matches_direct_patch_sum():
    # With every conv weight equal, each token is a plain patch sum.
    rng = np.random.default_rng(2)
    pe = PatchEmbed((2, 4, 4), 5, rng, dtype=np.float64)
    pe.proj.weight.data = np.full_like(pe.proj.weight.data, 0.5)
    pe.proj.bias.data = np.zeros_like(pe.proj.bias.data)
    clip = rng.standard_normal((2, 3, 4, 8, 8))
    out = pe(Tensor(clip))
    patches = clip.reshape(2, 3, 2, 2, 2, 4, 2, 4)
    sums = 0.5 * patches.sum(axis=(1, 3, 5, 7))  # (N, T', Gh, Gw)
    assert np.allclose(out.data, sums[..., None], atol=1e-10)


def test_patch_embed_matches_einsum_oracle():
    rng = np.random.default_rng(3)
    pe = PatchEmbed((2, 3, 3), 4, rng, dtype=np.float64)
    clip = rng.standard_normal((1, 3, 4, 6, 9))
    out = pe(Tensor(clip))
    w, b = pe.proj.weight.data, pe.proj.bias.data
    expect = np.zeros((1, 2, 2, 3, 4))
    for tp in range(2):
        for gy in range(2):
            for gx in range(3):
                patch = clip[0, :, 2 * tp : 2 * tp + 2,
                             3 * gy : 3 * gy + 3, 3 * gx : 3 * gx + 3]
                expect[0, tp, gy, gx] = np.einsum("cthw,octhw->o", patch, w) + b
    assert np.allclose(out.data, expect, atol=1e-10)


def test_positional_table_bounded_and_deterministic():
    t1 = positional_table(4, 4, 4, 32)
    t2 = positional_table(4, 4, 4, 32)
    assert np.abs(t1).max() <= 1.0 + 1e-6
    assert np.array_equal(t1, t2)


def test_positional_table_axis_blocks():
    c = 30
    ct = c - 2 * (c // 3)
    tab = positional_table(3, 4, 5, c)
    # first block varies only with time, second only with rows, third with cols
    assert np.ptp(tab[:, :, :, :ct], axis=(1, 2)).max() == 0.0
    assert np.ptp(tab[:, :, :, ct : 2 * ct], axis=(0, 2)).max() == 0.0
    assert np.ptp(tab[:, :, :, 2 * ct :], axis=(0, 1)).max() == 0.0
    assert np.ptp(tab[:, 0, 0, :ct], axis=0).max() > 0.0


def test_positional_first_channel_is_sin_t():
    tab = positional_table(6, 2, 2, 12)
    assert np.allclose(tab[:, 0, 0, 0], np.sin(np.arange(6)), atol=1e-6)


def test_add_positional_on_zero_tokens():
    tokens = Tensor(np.zeros((2, 3, 4, 4, 16), dtype=np.float32))
    out = add_positional(tokens)
    tab = positional_table(3, 4, 4, 16)
    assert np.allclose(out.data[0], tab) and np.allclose(out.data[1], tab)
