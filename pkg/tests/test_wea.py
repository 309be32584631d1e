"""Window scoring, selection, gather/scatter, and windowed attention."""

import numpy as np
import pytest

from wvt.errors import ConfigError, DimensionError
from wvt.nn import MultiHeadAttention
from wvt.tensor import Tensor
from wvt.wea import (FUSIONS, SCHEMES, WindowEnhancedAttention,
                     attention_heatmaps, gather_windows, pool_fuse,
                     scatter_windows, score_windows, select_window,
                     window_attention)


def _brute_best(spatial, s):
    """Independent selection oracle: loop every window, sum, first argmax."""
    gh, gw = spatial.shape
    best_val, best_idx = -np.inf, -1
    u_w = gw - s + 1
    for y in range(gh - s + 1):
        for x in range(u_w):
            v = spatial[y : y + s, x : x + s].sum()
            if v > best_val:
                best_val, best_idx = v, y * u_w + x
    return best_idx


def test_pool_fuse_hand_case():
    tokens = np.array([1.0, 3.0]).reshape(1, 1, 1, 1, 2)
    assert pool_fuse(tokens, "sum")[0, 0, 0, 0] == 5.0  # avg 2 + max 3
    assert pool_fuse(tokens, "concat")[0, 0, 0, 0] == 5.0  # unit projection
    assert pool_fuse(tokens, "concat", proj_w=(0.5, 2.0), proj_b=1.0)[0, 0, 0, 0] \
        == 0.5 * 2.0 + 2.0 * 3.0 + 1.0


def test_pool_fuse_shape_and_reject():
    tokens = np.zeros((2, 3, 4, 5, 8))
    assert pool_fuse(tokens).shape == (2, 3, 20, 1)
    with pytest.raises(ConfigError):
        pool_fuse(tokens, "mean")


def test_score_windows_equals_window_sums():
    rng = np.random.default_rng(0)
    spatial = rng.standard_normal((2, 3, 6, 7))
    scored = score_windows(spatial, np.ones((3, 3)))
    assert scored.shape == (2, 3, 4, 5)
    for n in range(2):
        for t in range(3):
            for y in range(4):
                for x in range(5):
                    expect = spatial[n, t, y : y + 3, x : x + 3].sum()
                    assert abs(scored[n, t, y, x] - expect) < 1e-12


def test_score_windows_valid_extent():
    # 14-wide grid with a 7 kernel leaves 8 placements per axis
    scored = score_windows(np.zeros((1, 2, 14, 14)), np.ones((7, 7)))
    assert scored.shape == (1, 2, 8, 8)
    scored = score_windows(np.zeros((1, 2, 4, 4)), np.ones((4, 4)))
    assert scored.shape == (1, 2, 1, 1)
    with pytest.raises(ConfigError):
        score_windows(np.zeros((1, 2, 4, 4)), np.ones((5, 5)))


def test_select_window_flat_index_decomposition():
    scored = np.zeros((1, 1, 8, 8))
    scored[0, 0, 1, 3] = 5.0  # flat 1 * 8 + 3 = 11
    sel = select_window(scored, 7)
    assert sel.idx[0, 0] == 11 and sel.y[0, 0] == 1 and sel.x[0, 0] == 3


@pytest.mark.parametrize("corner", [(0, 0), (0, 7), (7, 0), (7, 7)])
def test_select_window_corners(corner):
    scored = np.zeros((1, 1, 8, 8))
    scored[(0, 0) + corner] = 1.0
    sel = select_window(scored, 7)
    assert (sel.y[0, 0], sel.x[0, 0]) == corner


def test_select_window_tie_takes_lowest_index():
    scored = np.zeros((1, 2, 3, 3))  # all equal: every window ties
    sel = select_window(scored, 2)
    assert np.all(sel.idx == 0)
    scored[0, 0, 2, 1] = 4.0
    scored[0, 0, 0, 1] = 4.0  # tie between flat 1 and flat 7
    sel = select_window(scored, 2)
    assert sel.idx[0, 0] == 1


def test_select_window_rejects_nonfinite():
    scored = np.zeros((1, 1, 2, 2))
    scored[0, 0, 1, 1] = np.nan
    with pytest.raises(DimensionError):
        select_window(scored, 3)


def test_select_window_against_brute_force_1000():
    rng = np.random.default_rng(42)
    hits = 0
    for trial in range(250):
        gh, gw = rng.integers(4, 10, size=2)
        s = int(rng.integers(2, min(gh, gw) + 1))
        spatial = rng.standard_normal((1, 4, gh, gw))
        scored = score_windows(spatial, np.ones((s, s)))
        sel = select_window(scored, s)
        for t in range(4):  # 250 trials x 4 frames = 1000 maps
            assert sel.idx[0, t] == _brute_best(spatial[0, t], s)
            hits += 1
    assert hits == 1000


@pytest.mark.parametrize("u", range(1, 17))
def test_flat_index_round_trip(u):
    idx = np.arange(u * u).reshape(1, -1)
    scored = np.zeros((1, u * u, u, u))
    for k in range(u * u):
        scored[0, k, k // u, k % u] = 1.0
    sel = select_window(scored, 1)
    assert np.array_equal(sel.idx, idx)
    assert np.array_equal(sel.y * u + sel.x, idx)


def test_softmax_preserves_argmax_1000():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((1000, 25)) * rng.uniform(0.1, 30, size=(1000, 1))
    shifted = np.exp(v - v.max(axis=1, keepdims=True))
    soft = shifted / shifted.sum(axis=1, keepdims=True)
    assert np.array_equal(soft.argmax(axis=1), v.argmax(axis=1))


def test_gather_scatter_round_trip_bit_identical():
    rng = np.random.default_rng(3)
    tokens = Tensor(rng.standard_normal((2, 3, 5, 6, 4)).astype(np.float32))
    spatial = rng.standard_normal((2, 3, 5, 6))
    sel = select_window(score_windows(spatial, np.ones((3, 3))), 3)
    win = gather_windows(tokens, sel)
    assert win.shape == (2, 3, 3, 3, 4)
    back = scatter_windows(tokens, sel, win)
    assert np.array_equal(back.data, tokens.data)


def test_scatter_replaces_only_selected_windows():
    rng = np.random.default_rng(4)
    tokens = Tensor(rng.standard_normal((1, 2, 5, 5, 3)).astype(np.float32))
    spatial = rng.standard_normal((1, 2, 5, 5))
    sel = select_window(score_windows(spatial, np.ones((2, 2))), 2)
    win = Tensor(np.full((1, 2, 2, 2, 3), 99.0, dtype=np.float32))
    out = scatter_windows(tokens, sel, win).data
    mask = np.zeros((1, 2, 5, 5), dtype=bool)
    for t in range(2):
        y, x = int(sel.y[0, t]), int(sel.x[0, t])
        mask[0, t, y : y + 2, x : x + 2] = True
    assert np.all(out[mask] == 99.0)
    assert np.array_equal(out[~mask], tokens.data[~mask])


class _SeqRecorder:
    """Stands in for attention; records sequence shapes, returns zeros."""

    def __init__(self):
        self.shapes = []

    def __call__(self, seq):
        self.shapes.append(seq.shape)
        return Tensor(np.zeros_like(seq.data))


@pytest.mark.parametrize("scheme,expected", [
    ("joint", [(1, 8 * 49, 8)]),
    ("space_only", [(8, 49, 8)]),
    ("time_only", [(49, 8, 8)]),
    ("divided", [(8, 49, 8), (49, 8, 8)]),
])
def test_scheme_sequence_lengths(scheme, expected):
    # At the reference scale (T'=8, 7x7 window): joint mixes 392 tokens,
    # per-frame passes 49, per-offset passes 8.
    tokens = Tensor(np.random.default_rng(0)
                    .standard_normal((1, 8, 14, 14, 8)).astype(np.float32))
    sel = select_window(score_windows(
        np.random.default_rng(1).standard_normal((1, 8, 14, 14)),
        np.ones((7, 7))), 7)
    rec = _SeqRecorder()
    out = window_attention(tokens, sel, rec, scheme)
    assert rec.shapes == expected
    assert np.array_equal(out.data, tokens.data)  # zero update = identity


def test_window_attention_zero_projection_identity():
    rng = np.random.default_rng(5)
    for scheme in SCHEMES:
        mha = MultiHeadAttention(6, 2, np.random.default_rng(8))
        mha.wo.weight.data = np.zeros_like(mha.wo.weight.data)
        mha.wo.bias.data = np.zeros_like(mha.wo.bias.data)
        wea = WindowEnhancedAttention(6, 2, 3, np.random.default_rng(9), scheme=scheme)
        wea.mha = mha
        tokens = Tensor(rng.standard_normal((2, 4, 5, 5, 6)).astype(np.float32))
        assert np.array_equal(wea(tokens).data, tokens.data), scheme


def test_window_attention_touches_only_windows():
    rng = np.random.default_rng(6)
    for scheme in SCHEMES:
        wea = WindowEnhancedAttention(6, 2, 3, np.random.default_rng(10), scheme=scheme)
        tokens = Tensor(rng.standard_normal((1, 3, 6, 6, 6)).astype(np.float32))
        sel = wea.select(tokens.data)
        out = wea(tokens).data
        mask = np.zeros((1, 3, 6, 6), dtype=bool)
        for t in range(3):
            y, x = int(sel.y[0, t]), int(sel.x[0, t])
            mask[0, t, y : y + 3, x : x + 3] = True
        assert np.array_equal(out[~mask], tokens.data[~mask]), scheme
        assert np.abs(out[mask] - tokens.data[mask]).max() > 0, scheme


def test_window_covering_whole_grid_matches_plain_attention():
    # w == Gh == Gw leaves a single candidate window: the update must equal
    # one full self-attention pass with a residual over all frame tokens.
    rng = np.random.default_rng(11)
    wea = WindowEnhancedAttention(4, 2, 3, np.random.default_rng(12),
                                  scheme="space_only")
    tokens = Tensor(rng.standard_normal((2, 2, 3, 3, 4)).astype(np.float32))
    out = wea(tokens).data
    seq = tokens.reshape(2 * 2, 9, 4)
    expect = (seq + wea.mha(seq)).data.reshape(2, 2, 3, 3, 4)
    assert np.allclose(out, expect, atol=1e-6)


def test_selection_ignores_outside_perturbation():
    # A dominant window pins selection; attention reads only window tokens,
    # so changing a far-away token leaves the attended windows untouched.
    rng = np.random.default_rng(13)
    wea = WindowEnhancedAttention(4, 2, 2, np.random.default_rng(14))
    base = rng.standard_normal((1, 2, 6, 6, 4)).astype(np.float32)
    base[:, :, 0:2, 0:2, :] += 10.0
    t1 = Tensor(base.copy())
    bumped = base.copy()
    bumped[0, 0, 5, 5, :] += 1.0
    t2 = Tensor(bumped)
    sel1, sel2 = wea.select(t1.data), wea.select(t2.data)
    assert np.array_equal(sel1.idx, sel2.idx)
    o1, o2 = wea(t1).data, wea(t2).data
    assert np.array_equal(o1[:, :, 0:2, 0:2, :], o2[:, :, 0:2, 0:2, :])
    assert o2[0, 0, 5, 5, 0] != o1[0, 0, 5, 5, 0]


def test_select_rejects_oversize_window():
    wea = WindowEnhancedAttention(4, 2, 7, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        wea.select(np.zeros((1, 2, 4, 4, 4)))


def test_constructor_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        WindowEnhancedAttention(4, 2, 3, rng, scheme="global")
    with pytest.raises(ConfigError):
        WindowEnhancedAttention(4, 2, 3, rng, fusion="prod")
    with pytest.raises(ConfigError):
        WindowEnhancedAttention(4, 2, 0, rng)


@pytest.mark.parametrize("scheme,total", [
    ("joint", 1.0),          # one softmax over all T'*w*w keys
    ("space_only", 3.0),     # one unit of mass per frame
    ("time_only", 4.0),      # one unit per intra-window offset (w*w)
    ("divided", (3.0 + 4.0) / 2),
])
def test_attention_heatmap_mass(scheme, total):
    rng = np.random.default_rng(15)
    wea = WindowEnhancedAttention(6, 2, 2, np.random.default_rng(16), scheme=scheme)
    tokens = rng.standard_normal((1, 3, 5, 5, 6)).astype(np.float32)
    sel = wea.select(tokens)
    heat = attention_heatmaps(tokens, sel, wea.mha, scheme)
    assert heat.shape == (1, 3, 2, 2)
    assert np.all(heat >= 0) and np.all(np.isfinite(heat))
    assert abs(heat.sum() - total) < 1e-5
