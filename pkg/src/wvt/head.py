"""Box head: RoI pooling over backbone tokens, per-class scores, loss.

A keyframe box is replicated across the temporal axis (2D RoI extended
to 3D), features are averaged over time, bilinearly sampled on a 7x7
grid inside the box, max-pooled spatially, and classified by a single
linear layer into independent per-class logits.
"""

from __future__ import annotations

import zlib
from typing import List, Sequence

import numpy as np

from . import tensor as tt
from .errors import DimensionError, InputError
from .evaluate import BoxAnnotation, DetRow, _check_box
from .model import VideoModel, ModelConfig
from .nn import Linear, Module
from .tensor import Tensor


def _sample_points(lo: np.ndarray, hi: np.ndarray, cells: int, size: int):
    """Continuous grid coords of cell-center samples inside [lo, hi)."""
    centers = (np.arange(cells) + 0.5) / cells  # fractions within the box
    pts = lo[:, None] + centers[None, :] * (hi - lo)[:, None]
    pts = pts * size - 0.5  # half-pixel convention on the feature grid
    pts = np.clip(pts, 0.0, size - 1.0)
    i0 = np.minimum(pts.astype(np.int64), max(size - 2, 0))
    frac = pts - i0
    return i0, frac


def roi_pool_3d(features: Tensor, boxes: np.ndarray, clip_index: np.ndarray,
                grid: int = 7) -> Tensor:
    """Pool (N, T', Gh, Gw, C) tokens into one C-vector per box.

    ``boxes`` is (B, 4) relative coordinates, ``clip_index`` maps each box
    to its batch row. Temporal mean, then bilinear samples on a
    ``grid x grid`` lattice inside the box, then spatial max.
    """
    if features.data.ndim != 5:
        raise DimensionError(f"expected (N, T', Gh, Gw, C) features, "
                             f"got {features.shape}")
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DimensionError(f"expected (B, 4) boxes, got {boxes.shape}")
    clip_index = np.asarray(clip_index, dtype=np.int64)
    b = boxes.shape[0]
    n, tp, gh, gw, c = features.shape
    clamped = np.clip(boxes, 0.0, 1.0)
    if np.any(clamped[:, 2] <= clamped[:, 0]) or np.any(clamped[:, 3] <= clamped[:, 1]):
        bad = np.flatnonzero((clamped[:, 2] <= clamped[:, 0])
                             | (clamped[:, 3] <= clamped[:, 1]))[0]
        raise InputError(f"degenerate box after clamping: {boxes[bad]}")

    fmap = features.mean(axis=1)  # (N, Gh, Gw, C)
    y0, fy = _sample_points(clamped[:, 1], clamped[:, 3], grid, gh)  # (B, grid)
    x0, fx = _sample_points(clamped[:, 0], clamped[:, 2], grid, gw)
    ni = clip_index[:, None, None]
    yy0 = y0[:, :, None]
    xx0 = x0[:, None, :]
    y1 = np.minimum(yy0 + 1, gh - 1)
    x1 = np.minimum(xx0 + 1, gw - 1)
    wy = fy[:, :, None, None]  # weights broadcast over (B, gy, gx, C)
    wx = fx[:, None, :, None]
    dt = features.dtype
    sampled = (fmap[ni, yy0, xx0] * ((1 - wy) * (1 - wx)).astype(dt)
               + fmap[ni, yy0, x1] * ((1 - wy) * wx).astype(dt)
               + fmap[ni, y1, xx0] * (wy * (1 - wx)).astype(dt)
               + fmap[ni, y1, x1] * (wy * wx).astype(dt))  # (B, grid, grid, C)
    return sampled.reshape(b, grid * grid, c).max(axis=1)


class RoiHead(Module):
    """Single linear classifier from pooled RoI features to class logits."""

    def __init__(self, channels: int, num_classes: int, rng, grid: int = 7,
                 dtype=np.float32):
        self.fc = Linear(channels, num_classes, rng, dtype)
        self.grid = grid

    def __call__(self, features: Tensor, boxes, clip_index) -> Tensor:
        roi = roi_pool_3d(features, boxes, clip_index, self.grid)
        return self.fc(roi)


class Detector(Module):
    """Backbone plus box head; the unit that checkpoints store."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.backbone = VideoModel(cfg, rng, dtype)
        self.head = RoiHead(cfg.embed_dim, cfg.num_classes, rng, dtype=dtype)
        self.cfg = cfg

    def __call__(self, clip: Tensor, boxes, clip_index) -> Tensor:
        return self.head(self.backbone(clip), boxes, clip_index)


def multilabel_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of per-class binary sigmoid losses, averaged over boxes."""
    targets = np.asarray(targets)
    if targets.shape != tuple(logits.shape):
        raise DimensionError(
            f"targets {targets.shape} do not match logits {tuple(logits.shape)}")
    if not np.all((targets == 0) | (targets == 1)):
        raise InputError("targets must be 0/1 multi-hot")
    return tt.bce_with_logits(logits, targets.astype(logits.dtype))


def make_proposals(gt: Sequence[BoxAnnotation], mode: str = "exact",
                   sigma: float = 0.0, seed: int = 0) -> List[BoxAnnotation]:
    """Stand-in for a region-proposal stage.

    ``exact`` copies ground-truth boxes; ``jitter`` adds Gaussian noise of
    scale ``sigma`` (relative units) to each corner, clamped to [0, 1].
    The noise stream is derived per clip, so proposals do not depend on
    the order clips are visited.
    """
    if mode == "exact" or (mode == "jitter" and sigma == 0.0):
        return list(gt)
    if mode != "jitter":
        raise InputError(f"unknown proposal mode {mode!r}")
    by_clip = {}
    for ann in gt:
        by_clip.setdefault(ann.clip_id, []).append(ann)
    out = []
    for clip_id in sorted(by_clip):
        ss = np.random.SeedSequence([seed, zlib.crc32(clip_id.encode())])
        rng = np.random.default_rng(ss)
        for ann in by_clip[clip_id]:
            x1, y1, x2, y2 = np.clip(np.asarray(ann.box) + rng.normal(0, sigma, 4),
                                     0.0, 1.0)
            if x2 < x1:
                x1, x2 = x2, x1
            if y2 < y1:
                y1, y2 = y2, y1
            eps = 1e-3
            x2, y2 = min(max(x2, x1 + eps), 1.0), min(max(y2, y1 + eps), 1.0)
            x1, y1 = x2 - max(x2 - x1, eps), y2 - max(y2 - y1, eps)
            box = _check_box((float(x1), float(y1), float(x2), float(y2)))
            out.append(BoxAnnotation(ann.clip_id, box, ann.class_ids, ann.person_id))
    return out


def detections_from_scores(anns: Sequence[BoxAnnotation],
                           scores: np.ndarray) -> List[DetRow]:
    """One detection row per (box, class) from a (B, K) score matrix."""
    if len(anns) != scores.shape[0]:
        raise DimensionError("one score row per proposal required")
    rows = []
    for ann, row in zip(anns, scores):
        for k, s in enumerate(row):
            rows.append(DetRow(ann.clip_id, ann.box, k, float(s)))
    return rows
